import pytest

from gsdmae import config as config_mod
from gsdmae.pipeline import synth_dataset


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Twelve 160 px scenes, two classes."""
    return synth_dataset(12, 160, seed=7, out_dir=tmp_path_factory.mktemp("small_data"))


@pytest.fixture
def fast_cfg():
    """Toy config shrunk so a step takes a fraction of a second."""
    cfg = config_mod.preset("toy")
    config_mod.apply_overrides(cfg, ["batch_size=2", "steps=6", "warmup_steps=2",
                                     "encoder.depth=1", "decoder.decode_depth=1"])
    return cfg.validate()


_ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 11


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; assert afterwards."""
    results = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        results[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(results.get(n, f"criterion {n:2d} [FAIL] not run or errored before check"))
