import numpy as np
import pytest

from nep.events import ClinicalEvent, EventVocabulary, PatientRecord


def make_record(pid, triples, outcomes=None):
    events = tuple(ClinicalEvent(t, v, ts) for t, v, ts in triples)
    return PatientRecord(pid, events, outcomes or {})


@pytest.fixture
def tiny_vocab():
    return EventVocabulary([
        ("lab", "L003"), ("lab", "L007"),
        ("diagnosis", "D007"), ("diagnosis", "D001"),
        ("medication", "M001"),
    ])


@pytest.fixture
def tiny_record():
    return make_record("P1", [
        ("lab", "L003", 0),
        ("diagnosis", "D007", 2),
        ("medication", "M001", 7),
        ("lab", "L007", 7),
        ("diagnosis", "D001", 40),
    ])


def all_kernel_impls():
    """Every available kernel implementation (numpy fallback + compiled)."""
    from nep import kernels

    impls = [kernels]
    try:
        from nep import _ckernels

        impls.append(_ckernels)
    except ImportError:
        pass
    return impls


def rng(seed=0):
    return np.random.default_rng(seed)
