import numpy as np
import pytest
from PIL import Image


def _write_images(root, n, size=(48, 40), seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        arr = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / f"img{k:03d}.png")
    return root


@pytest.fixture
def image_dir(tmp_path):
    return _write_images(tmp_path / "corpus", 8)


@pytest.fixture
def make_image_dir(tmp_path):
    def make(n, name="corpus", **kw):
        return _write_images(tmp_path / name, n, **kw)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_RESULTS = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, results, number, title):
        self.results = results
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}"
        if self.detail:
            line += f"  [{self.detail}]"
        if exc_type is not None and exc_type is not AssertionError:
            line += f"  ({exc_type.__name__}: {exc})"
        self.results.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion(request):
    results = request.config.stash.setdefault(_RESULTS, [])
    return lambda number, title: _Criterion(results, number, title)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
