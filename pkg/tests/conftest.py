import os

import numpy as np
import pytest

from dmn.datasets import fisher_yates_permutation, load_mnist_dir, write_idx_images, write_idx_labels


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False,
                     help="run the multi-hour CIFAR acceptance checks")


def pytest_configure(config):
    if config.getoption("--extended"):
        os.environ["DMN_EXTENDED"] = "1"


def full_mnist_dir():
    """Directory holding the full MNIST IDX files, if ``DMN_DATA_DIR`` provides one."""
    root = os.environ.get("DMN_DATA_DIR")
    if not root:
        return None
    for base in (os.path.join(root, "mnist"), root):
        try:
            batch = load_mnist_dir(base, "train")
        except (FileNotFoundError, ValueError):
            continue
        if len(batch) == 60000:
            return base
    return None


def _write_sample(directory, train_per_class=400):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = np.asarray(x, dtype=np.uint8).reshape(-1, 28, 28)
    y = np.asarray(y, dtype=np.int64)
    tr, te = [], []
    for c in range(10):
        idx = np.nonzero(y == c)[0]
        tr.append(idx[:train_per_class])
        te.append(idx[train_per_class:])
    tr, te = np.concatenate(tr), np.concatenate(te)
    # interleave classes the way the full training file does
    tr = tr[fisher_yates_permutation(tr.size, 0)]
    te = te[fisher_yates_permutation(te.size, 1)]
    os.makedirs(directory, exist_ok=True)
    write_idx_images(os.path.join(directory, "train-images-idx3-ubyte"), x[tr])
    write_idx_labels(os.path.join(directory, "train-labels-idx1-ubyte"), y[tr])
    write_idx_images(os.path.join(directory, "t10k-images-idx3-ubyte"), x[te])
    write_idx_labels(os.path.join(directory, "t10k-labels-idx1-ubyte"), y[te])
    return directory


@pytest.fixture(scope="session")
def mnist_sample_dir(tmp_path_factory):
    """IDX files of the 5000-image MNIST sample shipped with mlxtend (4000 train / 1000 test)."""
    pytest.importorskip("mlxtend")
    return _write_sample(str(tmp_path_factory.mktemp("mnist-sample")))


@pytest.fixture(scope="session")
def mnist_sample(mnist_sample_dir):
    return load_mnist_dir(mnist_sample_dir, "train"), load_mnist_dir(mnist_sample_dir, "test")


@pytest.fixture(scope="session")
def mnist_real(mnist_sample_dir):
    """Full MNIST when available, otherwise the mlxtend sample; returns (train, test, label)."""
    base = full_mnist_dir()
    if base:
        return load_mnist_dir(base, "train"), load_mnist_dir(base, "test"), "full"
    return load_mnist_dir(mnist_sample_dir, "train"), load_mnist_dir(mnist_sample_dir, "test"), "sample"


_ACCEPTANCE = []


@pytest.fixture
def report(capsys):
    """``report(n, status, detail)`` prints one acceptance line, then fails or skips accordingly."""
    def _report(n, status, detail):
        line = f"criterion {n:2d}: {status} - {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        if status == "SKIP":
            pytest.skip(detail)
        assert status == "PASS", line
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
