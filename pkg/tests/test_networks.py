import math

import numpy as np
import pytest

from dsadapt.autodiff import Tensor, backward, default_dtype, mse, no_grad, softmax_cross_entropy
from dsadapt.networks import (
    ArchitectureSpec,
    ConfigError,
    build_bundle,
    build_classifier,
    build_conv_decoder,
    build_conv_encoder,
    build_domain_classifier,
    build_mlp_pair,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

from oracles import central_diff, rel_err

CONV = ArchitectureSpec("conv28", (1, 28, 28), 3)


def rng(seed=0):
    return np.random.default_rng(seed)


def images(n, seed=0, dtype=np.float32):
    return Tensor(rng(seed).uniform(-1, 1, (n, 1, 28, 28)).astype(dtype))


class TestConvEncoder:
    def test_output_shape(self):
        enc = build_conv_encoder(3, rng())
        assert enc(images(4)).shape == (4, 3)

    def test_intermediate_shapes(self):
        enc = build_conv_encoder(10, rng())
        x = images(2)
        shapes = []
        for layer in enc.layers:
            x = layer(x)
            shapes.append(x.shape[1:])
        assert shapes[3] == (16, 14, 14)   # after first pool
        assert shapes[4] == (8, 7, 7)      # stride-2 conv
        assert shapes[7] == (8, 2, 2)      # adaptive pool
        assert shapes[8] == (32,)
        assert shapes[9] == (10,)

    def test_bad_latent(self):
        with pytest.raises(ConfigError):
            build_conv_encoder(4, rng())

    def test_separate_encoders_are_disjoint(self):
        a, b = build_conv_encoder(3, rng(1)), build_conv_encoder(3, rng(1))
        before = [p.data.copy() for p in b.parameters()]
        for p in a.parameters():
            p.data += 1.0
        for p, q in zip(b.parameters(), before):
            np.testing.assert_array_equal(p.data, q)


class TestConvDecoder:
    def test_shape_and_range(self):
        dec = build_conv_decoder(3, rng())
        out = dec(Tensor(rng(1).standard_normal((5, 3)).astype(np.float32) * 10))
        assert out.shape == (5, 1, 28, 28)
        assert out.data.min() >= -1 and out.data.max() <= 1

    def test_round_trip_finite(self):
        enc, dec = build_conv_encoder(3, rng()), build_conv_decoder(3, rng(1))
        x = images(6)
        loss = mse(dec(enc(x)), x)
        assert math.isfinite(loss.item())


class TestHeads:
    def test_classifier_shapes(self):
        assert build_classifier(3, 2, rng())(Tensor(np.zeros((7, 3), np.float32))).shape == (7, 2)
        assert build_classifier(10, 10, rng())(Tensor(np.zeros((7, 10), np.float32))).shape == (7, 10)

    def test_classifier_needs_two_classes(self):
        with pytest.raises(ConfigError):
            build_classifier(3, 1, rng())

    def test_zero_final_layer_gives_ln_k(self):
        clf = build_classifier(10, 10, rng())
        clf[2].weight.data[:] = 0
        clf[2].bias.data[:] = 0
        logits = clf(Tensor(rng(2).standard_normal((4, 10)).astype(np.float32)))
        assert softmax_cross_entropy(logits, [0, 3, 9, 1]).item() == pytest.approx(math.log(10), rel=1e-6)

    def test_domain_classifier(self):
        head = build_domain_classifier(3, rng())
        assert head(Tensor(np.zeros((2, 3), np.float32))).shape == (2, 2)
        assert head.num_parameters() == 3 * 2 + 2
        again = build_domain_classifier(3, rng())
        np.testing.assert_array_equal(head.weight.data, again.weight.data)


class TestMlp:
    def test_shapes(self):
        enc, dec = build_mlp_pair(2, 3, rng())
        assert enc(Tensor(np.zeros((4, 2), np.float32))).shape == (4, 3)
        enc, dec = build_mlp_pair(3, 3, rng())
        assert dec(Tensor(np.zeros((4, 3), np.float32))).shape == (4, 3)

    def test_round_trip_gradcheck(self):
        with default_dtype(np.float64):
            enc, dec = build_mlp_pair(3, 3, rng(3))
        x = Tensor(rng(4).uniform(-1, 1, (6, 3)))
        params = enc.parameters() + dec.parameters()
        backward(mse(dec(enc(x)), x))

        def f():
            with no_grad():
                return mse(dec(enc(x)), x).item()

        worst = 0.0
        for p in params:
            analytic = p.grad.reshape(-1).copy()
            for i, v in central_diff(f, p.data).items():
                worst = max(worst, float(rel_err(analytic[i], v, floor=1e-4)))
        assert worst <= 1e-4


class TestBundle:
    def test_shared_references_same_parameters(self):
        b = build_bundle(CONV, CONV, 2, shared_embedding=True, seed=0)
        assert b.f_source is b.f_target and b.d_source is b.d_target

    def test_separate_has_disjoint_ids(self):
        b = build_bundle(CONV, CONV, 2, shared_embedding=False, seed=0)
        src = {id(p) for m in (b.f_source, b.d_source) for p in m.parameters()}
        tgt = {id(p) for m in (b.f_target, b.d_target) for p in m.parameters()}
        assert not src & tgt

    def test_heterogeneous_inputs(self):
        s = ArchitectureSpec("mlp", (2,), 3)
        t = ArchitectureSpec("mlp", (3,), 3)
        b = build_bundle(s, t, 2, shared_embedding=False, seed=0)
        assert b.f_source(Tensor(np.zeros((2, 2), np.float32))).shape == (2, 3)
        assert b.f_target(Tensor(np.zeros((2, 3), np.float32))).shape == (2, 3)
        with pytest.raises(ConfigError):
            build_bundle(s, t, 2, shared_embedding=True, seed=0)

    def test_head_widths_match_latent(self):
        spec = ArchitectureSpec("conv28", (1, 28, 28), 10)
        b = build_bundle(spec, spec, 10, shared_embedding=False, seed=0)
        assert b.classifier[0].weight.shape[1] == 10
        assert b.domain_classifier.weight.shape[1] == 10

    def test_seed_determinism(self):
        a = build_bundle(CONV, CONV, 2, False, seed=5)
        b = build_bundle(CONV, CONV, 2, False, seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_bad_specs(self):
        with pytest.raises(ConfigError):
            ArchitectureSpec("conv28", (1, 32, 32), 3)
        with pytest.raises(ConfigError):
            ArchitectureSpec("mlp", (2, 2), 3)
        with pytest.raises(ConfigError):
            ArchitectureSpec("resnet", (3,), 3)


def test_encoder_decoder_full_gradcheck():
    """Finite differences on a random 5% sample of every parameter tensor, 64-bit."""
    with default_dtype(np.float64):
        enc, dec = build_conv_encoder(3, rng(7)), build_conv_decoder(3, rng(8))
    x = Tensor(rng(9).uniform(-1, 1, (3, 1, 28, 28)))
    params = enc.parameters() + dec.parameters()

    def loss():
        return mse(dec(enc(x)), x)

    backward(loss())
    pick = rng(10)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        k = max(1, int(round(0.05 * p.data.size)))
        idx = pick.choice(p.data.size, size=k, replace=False)

        def f():
            with no_grad():
                return loss().item()

        for i, v in central_diff(f, p.data, h=1e-5, idx=idx).items():
            worst = max(worst, float(rel_err(analytic[i], v, floor=1e-6)))
    assert worst <= 1e-3


def test_checkpoint_round_trip(tmp_path):
    b = build_bundle(CONV, CONV, 2, shared_embedding=False, seed=1)
    b.f_source[1].running_mean[:] = 0.25
    path = tmp_path / "m.ckpt"
    save_checkpoint(b, path)
    header, arrays = read_checkpoint(path)
    names = [e["name"] for e in header["entries"]]
    assert "f_source.0.weight" in names and "f_target.0.weight" in names
    assert "f_source.1.running_mean" in names

    fresh = build_bundle(CONV, CONV, 2, shared_embedding=False, seed=2)
    load_checkpoint(fresh, path)
    for (_, p), (_, q) in zip(b.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    np.testing.assert_array_equal(fresh.f_source[1].running_mean, 0.25)


def test_checkpoint_shared_lists_encoder_once(tmp_path):
    b = build_bundle(CONV, CONV, 2, shared_embedding=True, seed=1)
    save_checkpoint(b, tmp_path / "s.ckpt")
    header, _ = read_checkpoint(tmp_path / "s.ckpt")
    assert not any(e["name"].startswith("f_target") for e in header["entries"])
    raw = (tmp_path / "s.ckpt").read_bytes()
    assert raw[:4] == b"DSCK"
