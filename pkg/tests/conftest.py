import pytest

from sld3d.config import apply_overrides, smoke_profile
from sld3d.synthetic import TreeSpec, make_dataset

TINY = [
    "crop_size=16",
    "backbone.encoder_blocks=3",
    "backbone.base_channels=4",
    "steps_per_epoch=2",
    'epochs={"pretrain": 2, "sld": 2, "refine": 1}',
    "n_refs=4",
    "crops_per_batch=2",
    "mixup_per_batch=1",
    "refinement.n_ensemble=2",
]


def tiny_config(*extra):
    return apply_overrides(smoke_profile(), TINY + list(extra))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_dataset(root, 3, 1, 1, seed=11, size=32, n_refs=4, spec=TreeSpec(root_radius=2.0), force=True)
    return root


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
