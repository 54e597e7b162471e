import pytest

from diffcap.config import TrainConfig
from diffcap.data import SyntheticSpec, generate_synthetic, load_dataset
from diffcap.numkernel import configure_threads

configure_threads(deterministic=True)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    spec = SyntheticSpec(n_examples=24, n_objects=3, n_actions=3, n_scenes=3, d_f=8, seed=3)
    return generate_synthetic(spec, tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=1, batch_size=8, T=50, n_steps=5, n_denoiser_blocks=2,
                       n_lm_blocks=2, n_v=9, d_v=16, heads=2, ffn_mult=2, lr=1e-3)


@pytest.fixture
def tiny_data(tiny_corpus, tiny_cfg):
    features_dir, captions = tiny_corpus
    return load_dataset(features_dir, captions, n_v=tiny_cfg.n_v)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """report(n, ok, detail): record one pass/fail line for acceptance criterion n."""
    def emit(n, ok, detail):
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        return ok
    return emit
