import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsdit import tensor as T
from dsdit.attention import (BranchProjection, joint_attention, m3_attention, merge_heads,
                             siamese_combine, split_heads)
from dsdit.tensor import DimensionError, SeededRng, Tape, Tensor, backward, grad_check


def brute_force(x_parts, projections, heads):
    """Explicit score matrix, one head and one query at a time (no batching)."""
    qs, ks, vs = [], [], []
    for x, p in zip(x_parts, projections):
        qs.append(x @ p.wq.data)
        ks.append(x @ p.wk.data)
        vs.append(x @ p.wv.data)
    q, k, v = np.concatenate(qs), np.concatenate(ks), np.concatenate(vs)
    n, c = q.shape
    d = c // heads
    out = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(n):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(d) for j in range(n)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    sizes = np.cumsum([len(x) for x in x_parts])[:-1]
    return np.split(out, sizes)


def projections(rng, dim, count, std=0.5):
    return [BranchProjection.init(rng, dim, std=std) for _ in range(count)]


class TestJointAttention:
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_brute_force(self, heads):
        rng = SeededRng(0)
        pz, pc = projections(rng, 8, 2)
        z, c = rng.normal((5, 8)), rng.normal((3, 8))
        hz, hc = joint_attention(Tensor(z), Tensor(c), pz, pc, heads=heads)
        oz, oc = brute_force([z, c], [pz, pc], heads)
        assert np.max(np.abs(hz.data - oz)) <= 1e-12
        assert np.max(np.abs(hc.data - oc)) <= 1e-12

    def test_batched_equals_per_sample(self):
        rng = SeededRng(1)
        pz, pc = projections(rng, 8, 2)
        z, c = rng.normal((3, 4, 8)), rng.normal((3, 4, 8))
        hz, _ = joint_attention(Tensor(z), Tensor(c), pz, pc, heads=2)
        for b in range(3):
            single, _ = joint_attention(Tensor(z[b]), Tensor(c[b]), pz, pc, heads=2)
            assert np.max(np.abs(hz.data[b] - single.data)) <= 1e-13

    def test_weights_are_row_stochastic(self):
        rng = SeededRng(2)
        pz, pc = projections(rng, 8, 2)
        _, w = joint_attention(Tensor(rng.normal((4, 8))), Tensor(rng.normal((4, 8))), pz, pc,
                               heads=4, return_weights=True)
        assert w.shape == (1, 4, 8, 8)
        assert np.max(np.abs(w.sum(-1) - 1.0)) <= 1e-12

    def test_token_permutation_equivariance(self):
        rng = SeededRng(3)
        pz, pc = projections(rng, 8, 2)
        z, c = rng.normal((6, 8)), rng.normal((4, 8))
        perm = np.random.default_rng(0).permutation(6)
        hz, hc = joint_attention(Tensor(z), Tensor(c), pz, pc, heads=2)
        pz_out, pc_out = joint_attention(Tensor(z[perm]), Tensor(c), pz, pc, heads=2)
        assert np.max(np.abs(pz_out.data - hz.data[perm])) <= 1e-12
        assert np.max(np.abs(pc_out.data - hc.data)) <= 1e-12

    def test_channel_mismatch(self):
        rng = SeededRng(4)
        pz, pc = projections(rng, 8, 2)
        with pytest.raises(DimensionError):
            joint_attention(Tensor(np.ones((3, 8))), Tensor(np.ones((3, 4))), pz, pc)

    def test_heads_must_divide(self):
        rng = SeededRng(5)
        pz, pc = projections(rng, 8, 2)
        with pytest.raises(DimensionError):
            joint_attention(Tensor(np.ones((3, 8))), Tensor(np.ones((3, 8))), pz, pc, heads=3)

    def test_gradients(self):
        rng = SeededRng(6)
        pz, pc = projections(rng, 4, 2, std=0.7)
        z, c = Tensor(rng.normal((2, 3, 4))), Tensor(rng.normal((2, 2, 4)))
        target = rng.normal((2, 3, 4))

        def f():
            hz, hc = joint_attention(z, c, pz, pc, heads=2)
            return T.add(T.mean(T.square(T.sub(hz, target))), T.mean(T.square(hc)))

        params = {f"z.{k}": v for k, v in pz.parameters().items()}
        params.update({f"c.{k}": v for k, v in pc.parameters().items()})
        assert grad_check(f, params).worst <= 1e-6


class TestSiamese:
    def setup_method(self):
        rng = SeededRng(10)
        self.pz, self.pl, self.pr = projections(rng, 8, 3)
        self.z, self.l, self.r = rng.normal((4, 8)), rng.normal((4, 8)), rng.normal((4, 8))

    def _paths(self, r=None):
        r = self.r if r is None else r
        qkv = self.pz.project(Tensor(self.z))
        (hlz, hl) = joint_attention(Tensor(self.z), Tensor(self.l), self.pz, self.pl, 2, qkv_z=qkv)
        (hrz, hr) = joint_attention(Tensor(self.z), Tensor(r), self.pz, self.pr, 2, qkv_z=qkv)
        return hlz, hl, hrz, hr

    def test_combination_against_oracle(self):
        hlz, _, hrz, _ = self._paths()
        ol, _ = brute_force([self.z, self.l], [self.pz, self.pl], 2)
        orr, _ = brute_force([self.z, self.r], [self.pz, self.pr], 2)
        for lam in (0.0, 0.3, 1.0, 2.5):
            out = siamese_combine(hlz, hrz, lam).data
            assert np.max(np.abs(out - (ol + lam * orr))) <= 1e-12

    def test_lr_path_blind_to_ref(self):
        hlz, hl, _, _ = self._paths()
        hlz2, hl2, _, _ = self._paths(r=self.r + 5.0)
        assert np.array_equal(hlz.data, hlz2.data)
        assert np.array_equal(hl.data, hl2.data)

    def test_lambda_zero_removes_ref_gradient(self):
        r = Tensor(self.r, requires_grad=True)
        with Tape() as tape:
            qkv = self.pz.project(Tensor(self.z))
            hlz, _ = joint_attention(Tensor(self.z), Tensor(self.l), self.pz, self.pl, 2, qkv_z=qkv)
            hrz, _ = joint_attention(Tensor(self.z), r, self.pz, self.pr, 2, qkv_z=qkv)
            loss = T.tsum(T.square(siamese_combine(hlz, hrz, 0.0)))
        assert not backward(loss, tape, [r])[r].any()

    def test_noisy_projection_gets_both_paths(self):
        """Shared W_z gradient equals the sum of the two single-path gradients."""
        z, l, r = Tensor(self.z), Tensor(self.l), Tensor(self.r)
        pz, pl, pr = self.pz, self.pl, self.pr
        params = list(pz.parameters().values())

        def grads(use_l, use_r):
            with Tape() as tape:
                qkv = pz.project(z)
                hlz, _ = joint_attention(z, l, pz, pl, 2, qkv_z=qkv)
                hrz, _ = joint_attention(z, r, pz, pr, 2, qkv_z=qkv)
                terms = []
                if use_l:
                    terms.append(T.tsum(T.mul(hlz, 0.7)))
                if use_r:
                    terms.append(T.tsum(T.mul(hrz, 0.7)))
                loss = terms[0] if len(terms) == 1 else T.add(*terms)
            return backward(loss, tape, params)

        both, only_l, only_r = grads(True, True), grads(True, False), grads(False, True)
        for p in params:
            assert np.max(np.abs(both[p] - only_l[p] - only_r[p])) <= 1e-12
            assert np.abs(only_l[p]).max() > 0 and np.abs(only_r[p]).max() > 0

    def test_negative_lambda_rejected(self):
        hlz, _, hrz, _ = self._paths()
        with pytest.raises(ValueError):
            siamese_combine(hlz, hrz, -0.1)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            siamese_combine(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


class TestM3:
    def test_matches_brute_force(self):
        rng = SeededRng(20)
        pz, pl, pr = projections(rng, 8, 3)
        z, l, r = rng.normal((4, 8)), rng.normal((4, 8)), rng.normal((4, 8))
        outs = m3_attention(Tensor(z), Tensor(l), Tensor(r), pz, pl, pr, heads=2)
        oracle = brute_force([z, l, r], [pz, pl, pr], 2)
        for a, b in zip(outs, oracle):
            assert np.max(np.abs(a.data - b)) <= 1e-12

    def test_weights_cover_3n(self):
        rng = SeededRng(21)
        pz, pl, pr = projections(rng, 8, 3)
        x = Tensor(rng.normal((2, 4, 8)))
        _, w = m3_attention(x, x, x, pz, pl, pr, heads=4, return_weights=True)
        assert w.shape == (2, 4, 12, 12)

    def test_ref_influences_noisy(self):
        rng = SeededRng(22)
        pz, pl, pr = projections(rng, 8, 3)
        z, l, r = rng.normal((4, 8)), rng.normal((4, 8)), rng.normal((4, 8))
        a = m3_attention(Tensor(z), Tensor(l), Tensor(r), pz, pl, pr)[0].data
        b = m3_attention(Tensor(z), Tensor(l), Tensor(r + 1.0), pz, pl, pr)[0].data
        assert np.abs(a - b).max() > 1e-6


class TestHeads:
    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 5))
    def test_split_merge_round_trip(self, heads, n):
        x = np.random.default_rng(n).normal(size=(2, n, 8))
        s = split_heads(Tensor(x), heads)
        assert s.shape == (2, heads, n, 8 // heads)
        assert np.array_equal(s.data[:, 0], x[..., :8 // heads])
        assert np.array_equal(merge_heads(s).data, x)

    def test_non_square_projection(self):
        w = Tensor(np.ones((4, 4)))
        with pytest.raises(DimensionError):
            BranchProjection(w, w, Tensor(np.ones((4, 3))))
