import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxrec.nn import (
    Adam,
    BiLstm,
    DenseLayer,
    EmbeddingTable,
    Parameter,
    backward,
    clip_global_norm,
    constant,
    cross_entropy,
    finite_diff_check,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)
from ctxrec.nn import engine


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_closed_form(self):
        assert np.allclose(softmax(np.array([math.log(2.0), 0.0])),
                           [2 / 3, 1 / 3])

    def test_large_logits_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(p).all()
        assert p[0] > 0.999999 and p[1] < 1e-6

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([np.nan, 0.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=20),
           st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        x = np.array(logits)
        p = softmax(x)
        assert (p > 0).all()
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.abs(p - softmax(x + shift)).max() <= 1e-12


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0

    def test_closed_form(self):
        assert abs(cross_entropy(np.array([0.25, 0.75]), 0) - math.log(4)) < 1e-12

    def test_clamp(self):
        assert cross_entropy(np.array([0.0, 1.0]), 0) == -math.log(1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(np.array([0.5, 0.5]), 2)


def _reference_bilstm(lstm: BiLstm, xs: np.ndarray) -> np.ndarray:
    """Independent step-by-step cell: per-gate slices, explicit recurrences."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    def run(d, seq):
        h = np.zeros(d.hidden_dim)
        c = np.zeros(d.hidden_dim)
        n = d.hidden_dim
        for x in seq:
            z = d.w_in.value @ x + d.w_rec.value @ h + d.bias.value
            i, f, g, o = sig(z[:n]), sig(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sig(z[3 * n:])
            c = f * c + i * g
            h = o * np.tanh(c)
        return h

    return np.concatenate([run(lstm.fwd, xs), run(lstm.bwd, xs[::-1])])


class TestBiLstm:
    def test_zero_parameters_give_zero_output(self):
        lstm = BiLstm("z", 3, 4, np.random.default_rng(0))
        for p in lstm.params():
            p.value[...] = 0.0
        out = lstm.run(np.random.default_rng(1).normal(size=(6, 3)))
        assert np.all(out == 0.0)

    def test_identical_directions_on_length_one(self):
        rng = np.random.default_rng(2)
        lstm = BiLstm("s", 3, 4, rng)
        for pf, pb in zip(lstm.fwd.params(), lstm.bwd.params()):
            pb.value[...] = pf.value
        out = lstm.run(rng.normal(size=(1, 3)))
        assert np.array_equal(out[:4], out[4:])

    def test_matches_independent_reference_cell(self):
        rng = np.random.default_rng(3)
        lstm = BiLstm("r", 2, 2, rng)
        xs = rng.normal(size=(3, 2))
        assert np.abs(lstm.run(xs) - _reference_bilstm(lstm, xs)).max() < 1e-10

    def test_reversed_sequence_swaps_halves(self):
        rng = np.random.default_rng(4)
        a = BiLstm("a", 3, 5, rng)
        b = BiLstm("b", 3, 5, rng)
        # b gets a's directions swapped
        for pb, pa in zip(b.fwd.params(), a.bwd.params()):
            pb.value[...] = pa.value
        for pb, pa in zip(b.bwd.params(), a.fwd.params()):
            pb.value[...] = pa.value
        xs = rng.normal(size=(7, 3))
        out_a = a.run(xs)
        out_b = b.run(xs[::-1])
        assert np.allclose(out_a[:5], out_b[5:], atol=1e-12)
        assert np.allclose(out_a[5:], out_b[:5], atol=1e-12)

    def test_empty_sequence_rejected(self):
        lstm = BiLstm("e", 3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="auxiliary"):
            lstm.run(np.zeros((0, 3)))


class TestBackward:
    def test_sum_of_parameters_gives_unit_gradients(self):
        a = Parameter("a", np.array([1.0, 2.0, 3.0]))
        b = Parameter("b", np.array([[4.0, 5.0]]))
        loss = engine.add(engine.vsum(engine.param_vector(a)),
                          engine.vsum(engine.param_vector(b)))
        backward(loss)
        assert np.array_equal(a.grad, np.ones(3))
        assert np.array_equal(b.grad, np.ones((1, 2)))

    def test_unused_parameter_gets_zero_gradient(self):
        a = Parameter("a", np.array([1.0]))
        unused = Parameter("u", np.array([5.0]))
        loss = engine.vsum(engine.param_vector(a))
        backward(loss)
        assert np.array_equal(unused.grad, np.zeros(1))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(constant(np.array([1.0, 2.0])))

    def test_shared_subgraph_accumulates_once(self):
        a = Parameter("a", np.array([2.0]))
        v = engine.param_vector(a)
        s = engine.vsum(v)
        loss = engine.add(s, s)  # d(loss)/da = 2
        backward(loss)
        assert np.array_equal(a.grad, np.array([2.0]))

    def test_embedding_gradient_sparse_over_rows(self):
        rng = np.random.default_rng(5)
        table = EmbeddingTable("t", 6, 3, rng)
        out = table.lookup(np.array([1, 1, 4]))
        backward(engine.vsum(out))
        assert np.array_equal(table.weights.grad[1], 2 * np.ones(3))
        assert np.array_equal(table.weights.grad[4], np.ones(3))
        untouched = [0, 2, 3, 5]
        assert np.all(table.weights.grad[untouched] == 0.0)

    def test_lookup_out_of_range(self):
        table = EmbeddingTable("t", 4, 2, np.random.default_rng(0))
        with pytest.raises(IndexError):
            table.lookup(np.array([4]))
        with pytest.raises(IndexError):
            table.lookup(np.array([-1]))

    def test_softmax_cross_entropy_matches_plain_ops(self):
        logits = constant(np.array([0.3, -1.2, 2.0]))
        loss, probs = softmax_cross_entropy(logits, 1)
        assert abs(float(loss.value) - cross_entropy(probs, 1)) < 1e-12
        backward(loss)
        expected = probs.copy()
        expected[1] -= 1.0
        assert np.allclose(logits.grad, expected)


class TestAdam:
    def test_first_step_magnitude(self):
        p = Parameter("p", np.array([0.0]))
        opt = Adam([p], lr=0.001)
        p.grad[...] = 1.0
        opt.step()
        assert abs(p.value[0] + 0.001 / (1.0 + 1e-8)) < 1e-15

    def test_zero_gradient_is_noop(self):
        p = Parameter("p", np.array([1.5, -2.0]))
        opt = Adam([p])
        p.grad[...] = 0.0
        opt.step()
        assert np.array_equal(p.value, np.array([1.5, -2.0]))

    def test_constant_gradient_keeps_step_near_lr(self):
        p = Parameter("p", np.array([0.0]))
        opt = Adam([p], lr=0.001)
        prev = p.value.copy()
        for _ in range(2):
            p.grad[...] = 1.0
            opt.step()
            delta = abs(float(p.value[0] - prev[0]))
            assert abs(delta - 0.001) < 1e-9
            prev = p.value.copy()

    def test_shape_mismatch_rejected(self):
        p = Parameter("p", np.zeros(3))
        opt = Adam([p])
        with pytest.raises(ValueError):
            opt.step([np.zeros(4)])

    def test_non_finite_gradient_rejected(self):
        p = Parameter("p", np.zeros(2))
        opt = Adam([p])
        p.grad[...] = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError):
            opt.step()

    def test_clip_global_norm(self):
        a = Parameter("a", np.zeros(3))
        a.grad[...] = np.array([3.0, 4.0, 0.0])
        norm = clip_global_norm([a], 1.0)
        assert abs(norm - 5.0) < 1e-12
        assert abs(np.linalg.norm(a.grad) - 1.0) < 1e-12


class TestFiniteDiffCheck:
    def test_quadratic_passes_tightly(self):
        theta = Parameter("theta", np.random.default_rng(0).normal(size=8))

        def build():
            v = engine.param_vector(theta)
            return engine.scale(engine.vsum(engine.dot_last(v, v)), 0.5)

        report = finite_diff_check(build, [theta], tolerance=1e-8,
                                   rng=np.random.default_rng(1))
        assert report.passed, str(report)

    def test_corrupted_gradient_detected(self):
        theta = Parameter("theta", np.random.default_rng(0).normal(size=8))

        def build():
            v = engine.param_vector(theta)
            return engine.scale(engine.vsum(engine.dot_last(v, v)), 0.5)

        report = finite_diff_check(build, [theta], tolerance=1e-4,
                                   rng=np.random.default_rng(1),
                                   gradient_scale=2.0)
        assert not report.passed

    def test_bilstm_head_passes(self):
        rng = np.random.default_rng(6)
        lstm = BiLstm("g", 3, 4, rng)
        head = DenseLayer("h", 8, 1, rng)
        xs = rng.normal(size=(5, 3))

        def build():
            return engine.vsum(head(lstm.forward(constant(xs))))

        report = finite_diff_check(build, lstm.params() + head.params(),
                                   tolerance=1e-4, rng=np.random.default_rng(7))
        assert report.passed, str(report)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        tensors = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
        opt_state = {"step": 12,
                     "m": {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=5)},
                     "v": {"w": rng.normal(size=(3, 4)) ** 2,
                           "b": rng.normal(size=5) ** 2}}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors, config={"dim": 4}, optimizer=opt_state)
        ck = load_checkpoint(path)
        assert np.array_equal(ck.tensors["w"], tensors["w"])
        assert ck.config == {"dim": 4}
        state = ck.optimizer_state(["w", "b"])
        assert state["step"] == 12
        assert np.array_equal(state["v"]["b"], opt_state["v"]["b"])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_adam_state_round_trip_resumes_identically(self, tmp_path):
        rng = np.random.default_rng(9)
        p1 = Parameter("p", rng.normal(size=4))
        opt1 = Adam([p1], lr=0.01)
        for _ in range(3):
            p1.grad[...] = rng.normal(size=4)
            opt1.step()
        save_checkpoint(tmp_path / "s.ckpt", {"p": p1.value},
                        optimizer=opt1.state_dict())
        ck = load_checkpoint(tmp_path / "s.ckpt")
        p2 = Parameter("p", ck.tensors["p"])
        opt2 = Adam([p2], lr=0.01)
        opt2.load_state_dict(ck.optimizer_state(["p"]))
        g = np.random.default_rng(10).normal(size=4)
        p1.grad[...] = g
        p2.grad[...] = g
        opt1.step()
        opt2.step()
        assert np.array_equal(p1.value, p2.value)
