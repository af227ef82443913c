import numpy as np
import pytest

from midre import nn, synthdata

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def tiny_bundle():
    return synthdata.generate_synthfaces(4, 6, (16, 16, 3), seed=11)


@pytest.fixture(scope="session")
def tiny_splits(tiny_bundle):
    return synthdata.split_train_test(tiny_bundle.private, 2)


@pytest.fixture(scope="session")
def tiny_classifier(tiny_splits):
    train, test = tiny_splits
    arch = nn.ArchSpec.classifier_small((3, 16, 16), 4)
    model = nn.build_model(arch, seed=3)
    from midre.erasing import ErasePolicy

    return nn.train_classifier(model, train, test, ErasePolicy.no_defense(), nn.TrainConfig(epochs=5), seed=3)


@pytest.fixture(scope="session")
def tiny_decoder(tiny_bundle):
    arch = nn.ArchSpec.decoder((3, 16, 16), latent_dim=8)
    return nn.train_decoder(tiny_bundle.public, arch, nn.TrainConfig(epochs=2), seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
