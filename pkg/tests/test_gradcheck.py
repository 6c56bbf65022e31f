import numpy as np
import pytest

from tokenlab.embeddings import TokenizerSpec
from tokenlab.gradcheck import (CHECK_MODELS, grad_check, random_batch, rel_error, run_encoder_input_checks,
                                run_shipped_checks, shipped_tokenizers)
from tokenlab.model import SequenceClassifier


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert rel_error(2.0, 1.0) == 0.5


def test_shipped_inventory():
    names = [n for n, _ in shipped_tokenizers()]
    assert len(names) == len(set(names)) == 4 + 10 + 3 + 12


def test_detects_wrong_gradient(rng):
    model = SequenceClassifier.init(CHECK_MODELS["transformer"], TokenizerSpec(), 20, rng, np.float64)
    batch = random_batch(rng, 20)
    original = model.backward

    def broken(dlogits):
        grads, dinputs = original(dlogits)
        grads["layer0.wq"] = grads["layer0.wq"] * 1.01
        return grads, dinputs

    model.backward = broken
    res = grad_check(model, batch, rng.integers(0, 2, 3))
    assert not res.passed() and res.worst == "layer0.wq"


def test_requires_float64(rng):
    model = SequenceClassifier.init(CHECK_MODELS["transformer"], TokenizerSpec(), 20, rng, np.float32)
    with pytest.raises(ValueError):
        grad_check(model, random_batch(rng, 20))


def test_subset_of_shipped_checks():
    subset = [t for t in shipped_tokenizers() if t[0] in ("triplet-full", "lete:balanced")]
    results = run_shipped_checks(tokenizers=subset)
    assert len(results) == 4 and all(r.passed() for r in results)
    assert all(v <= 1e-6 for v in run_encoder_input_checks().values())
