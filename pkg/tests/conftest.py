import numpy as np
import pytest

from promptreg.encoders import EncoderConfig, FrozenEncoderPair, init_weights


def micro_config(**kw):
    base = dict(d=8, layers_f=1, layers_g=1, heads=2, M=3, patch_dim=4, vocab_size=64, L=4, max_seq=16, tau=10.0)
    base.update(kw)
    return EncoderConfig(**base)


def random_pair(config, seed=0):
    img, txt = init_weights(config, np.random.default_rng(seed))
    return FrozenEncoderPair.from_arrays(img, txt, config)


@pytest.fixture
def micro_pair():
    return random_pair(micro_config())


@pytest.fixture
def deep_micro_pair():
    return random_pair(micro_config(layers_f=3, layers_g=3), seed=3)


def micro_run(**kw):
    """A RunConfig small enough to pretrain and tune in well under a second."""
    from promptreg.harness.config import PromptConfig, RunConfig
    from promptreg.harness.data import SyntheticDatasetSpec

    base = dict(
        encoder=micro_config(),
        data=SyntheticDatasetSpec(C=6, base_count=3, samples_per_class_train=8, samples_per_class_test=6,
                                  samples_per_class_pretrain=8, M=3, patch_dim=4, noise_std=0.5),
        prompt=PromptConfig(J=1, V=2, T=4),
        epochs=3, batch_size=4, gpa_mu=2.0, gpa_sigma2=1.0, pretrain_epochs=2, pretrain_distractors=0, shots=None,
    )
    base.update(kw)
    return RunConfig(**base)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def record_criterion(number, name, ok, detail=""):
    ACCEPTANCE.append((number, name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
