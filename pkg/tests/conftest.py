import os
import textwrap

import pytest

import data

MINIMAL_SPEC = """
algorithm = deprl
seeds = 1
topology.kind = ring
task.kind = planted
task.n_workers = 4
task.d = 6
task.z = 2
task.samples_per_worker = 20
task.noise_std = 0.01
task.heterogeneity = 0.5
run.alpha = 0.05
run.beta = 0.05
run.tau = 2
run.rounds = 10
run.batch_size = 8
"""


@pytest.fixture
def planted():
    return data.generate_planted(4, 6, 2, 20, 0.01, 0.5, seed=3)


@pytest.fixture
def write_spec(tmp_path):
    def _write(text, name="exp.spec"):
        path = os.path.join(tmp_path, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(textwrap.dedent(text))
        return path

    return _write
