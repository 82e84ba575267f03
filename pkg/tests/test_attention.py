import numpy as np
import pytest

from cstr import (
    AttentionWeights,
    Rng,
    axial_attention_height,
    axial_attention_width,
    cross_attention,
    epipolar_mask,
    pixel_norm,
    relative_logits,
    seeded_normal,
)

F32 = np.float32


def make_weights(rng: Rng, c: int, heads: int, span: int) -> AttentionWeights:
    std = 1.0 / np.sqrt(c)
    return AttentionWeights(
        Wq=seeded_normal(rng, (c, c), std),
        Wk=seeded_normal(rng, (c, c), std),
        Wv=seeded_normal(rng, (c, c), std),
        Wo=seeded_normal(rng, (c, c), std),
        rel_pos=seeded_normal(rng, (2 * span - 1, c // heads), 0.1),
    )


def dense_line_attention(x_q, x_kv, w: AttentionWeights, heads: int, mask=None):
    """Brute-force float64 attention over one token line (independent oracle)."""
    n, c = x_q.shape
    m = x_kv.shape[0]
    ch = c // heads
    span = w.span
    xq, xk = x_q.astype(np.float64), x_kv.astype(np.float64)
    wq, wk = w.Wq.astype(np.float64), w.Wk.astype(np.float64)
    wv, wo = w.Wv.astype(np.float64), w.Wo.astype(np.float64)
    rel = w.rel_pos.astype(np.float64)
    out = np.zeros((n, c))
    for h in range(heads):
        hs = slice(h * ch, (h + 1) * ch)
        for i in range(n):
            logits = np.empty(m)
            qi = xq[i] @ wq[:, hs]
            for j in range(m):
                kj = xk[j] @ wk[:, hs]
                r = rel[j - i + span - 1]
                logits[j] = (
                    qi @ kj + qi @ (r @ wk[hs, hs]) + (r @ wq[hs, hs]) @ kj
                ) / np.sqrt(ch)
                if mask is not None:
                    logits[j] += mask[i, j]
            e = np.exp(logits - logits.max())
            attn = e / e.sum()
            out[i, hs] = sum(attn[j] * (xk[j] @ wv[:, hs]) for j in range(m))
    return out @ wo


# --- relative_logits structure ---


def test_zero_rel_pos_reduces_to_content():
    rng = Rng(1)
    c, heads = 6, 3
    w = make_weights(rng, c, heads, span=8)
    w = AttentionWeights(w.Wq, w.Wk, w.Wv, w.Wo, np.zeros_like(w.rel_pos))
    x = seeded_normal(rng, (5, c), 1.0)
    ch = c // heads
    for head in range(heads):
        hs = slice(head * ch, (head + 1) * ch)
        content = ((x @ w.Wq)[:, hs] @ (x @ w.Wk)[:, hs].T) / F32(np.sqrt(ch))
        np.testing.assert_array_equal(relative_logits(x, w, head), content)


def test_zero_content_gives_zero_logits():
    rng = Rng(2)
    w = make_weights(rng, 4, 2, span=8)
    x = np.zeros((6, 4), dtype=F32)
    for head in range(2):
        np.testing.assert_array_equal(
            relative_logits(x, w, head), np.zeros((6, 6), dtype=F32)
        )


def test_relative_logits_hand_case():
    # n=2, c=1, single head: every projection is a scalar
    wq, wk, r_m1, r_0, r_p1 = 2.0, 3.0, 0.5, -0.25, 1.5
    w = AttentionWeights(
        Wq=np.array([[wq]], dtype=F32),
        Wk=np.array([[wk]], dtype=F32),
        Wv=np.array([[1.0]], dtype=F32),
        Wo=np.array([[1.0]], dtype=F32),
        rel_pos=np.array([[r_m1], [r_0], [r_p1]], dtype=F32),
    )
    x0, x1 = 0.7, -1.1
    x = np.array([[x0], [x1]], dtype=F32)
    got = relative_logits(x, w, 0)

    def term(xi, xj, r):
        return (xi * wq) * (xj * wk) + (xi * wq) * (r * wk) + (r * wq) * (xj * wk)

    want = np.array(
        [[term(x0, x0, r_0), term(x0, x1, r_p1)],
         [term(x1, x0, r_m1), term(x1, x1, r_0)]]
    )
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_relative_logits_rejects_long_lines():
    w = make_weights(Rng(3), 4, 2, span=4)
    x = np.zeros((5, 4), dtype=F32)
    with pytest.raises(ValueError):
        relative_logits(x, w, 0)


# --- axial attention ---


def test_width_single_token_row():
    rng = Rng(4)
    c, heads = 4, 2
    w = make_weights(rng, c, heads, span=4)
    f = seeded_normal(rng, (c, 3, 1), 1.0)
    got = axial_attention_width(f, w, heads)
    for y in range(3):
        x = f[:, y, 0]
        want = x + (x @ w.Wv) @ w.Wo
        np.testing.assert_allclose(got[:, y, 0], want, atol=1e-6)


def test_width_zero_query_gives_uniform_attention():
    rng = Rng(5)
    c, heads, wpix = 4, 2, 6
    w = make_weights(rng, c, heads, span=8)
    w = AttentionWeights(np.zeros_like(w.Wq), w.Wk, w.Wv, w.Wo, np.zeros_like(w.rel_pos))
    f = seeded_normal(rng, (c, 2, wpix), 1.0)
    got = axial_attention_width(f, w, heads)
    for y in range(2):
        row = f[:, y, :].T
        mean_v = (row @ w.Wv).mean(axis=0)
        want = row + (np.tile(mean_v, (wpix, 1)) @ w.Wo)
        np.testing.assert_allclose(got[:, y, :].T, want, atol=1e-5)


def test_width_matches_dense_oracle():
    rng = Rng(6)
    c, heads = 8, 4
    w = make_weights(rng, c, heads, span=16)
    f = seeded_normal(rng, (c, 4, 8), 1.0)
    got = axial_attention_width(f, w, heads)
    for y in range(4):
        line = f[:, y, :].T
        want = line + dense_line_attention(line, line, w, heads)
        np.testing.assert_allclose(got[:, y, :].T, want, atol=1e-5)


def test_height_single_token_column():
    rng = Rng(7)
    c, heads = 4, 2
    w = make_weights(rng, c, heads, span=4)
    f = seeded_normal(rng, (c, 1, 5), 1.0)
    got = axial_attention_height(f, w, heads)
    for x in range(5):
        v = f[:, 0, x]
        want = v + (v @ w.Wv) @ w.Wo
        np.testing.assert_allclose(got[:, 0, x], want, atol=1e-6)


def test_height_matches_dense_oracle():
    rng = Rng(8)
    c, heads = 6, 2
    w = make_weights(rng, c, heads, span=8)
    f = seeded_normal(rng, (c, 6, 3), 1.0)
    got = axial_attention_height(f, w, heads)
    for x in range(3):
        col = f[:, :, x].T
        want = col + dense_line_attention(col, col, w, heads)
        np.testing.assert_allclose(got[:, :, x].T, want, atol=1e-5)


def test_height_is_width_of_transpose():
    rng = Rng(9)
    c, heads = 4, 2
    w = make_weights(rng, c, heads, span=8)
    f = seeded_normal(rng, (c, 5, 7), 1.0)
    by_height = axial_attention_height(f, w, heads)
    by_width_of_t = axial_attention_width(f.transpose(0, 2, 1), w, heads)
    np.testing.assert_array_equal(by_height, by_width_of_t.transpose(0, 2, 1))


def test_zero_rel_pos_shift_equivariance():
    rng = Rng(10)
    c, heads, wpix = 4, 2, 6
    w = make_weights(rng, c, heads, span=8)
    w = AttentionWeights(w.Wq, w.Wk, w.Wv, w.Wo, np.zeros_like(w.rel_pos))
    f = seeded_normal(rng, (c, 1, wpix), 1.0)
    pre = axial_attention_width(f, w, heads) - f
    for shift in (1, 3):
        rolled = np.roll(f, shift, axis=2)
        pre_rolled = axial_attention_width(rolled, w, heads) - rolled
        np.testing.assert_allclose(pre_rolled, np.roll(pre, shift, axis=2), atol=1e-5)


def test_output_shape_independent_of_heads():
    rng = Rng(11)
    c = 8
    f = seeded_normal(rng, (c, 3, 5), 1.0)
    shapes = set()
    for heads in (1, 2, 4, 8):
        w = make_weights(Rng(12), c, heads, span=8)
        shapes.add(axial_attention_width(f, w, heads).shape)
    assert shapes == {(8, 3, 5)}


def test_head_mismatch_rejected():
    w = make_weights(Rng(13), 8, 4, span=8)  # rel table sized for 2 channels/head
    f = np.zeros((8, 2, 2), dtype=F32)
    with pytest.raises(ValueError):
        axial_attention_width(f, w, 2)
    with pytest.raises(ValueError):
        axial_attention_width(f, w, 3)


# --- cross attention ---


def test_cross_uniform_when_queries_vanish():
    rng = Rng(14)
    c, heads, wpix = 4, 2, 5
    w = make_weights(rng, c, heads, span=8)
    w = AttentionWeights(np.zeros_like(w.Wq), w.Wk, w.Wv, w.Wo, np.zeros_like(w.rel_pos))
    f = seeded_normal(rng, (c, 2, wpix), 1.0)
    left, right, _ = cross_attention(f, f, w, heads)
    for y in range(2):
        row = f[:, y, :].T
        mean_v = (row @ w.Wv).mean(axis=0)
        want = row + (np.tile(mean_v, (wpix, 1)) @ w.Wo)
        np.testing.assert_allclose(left[:, y, :].T, want, atol=1e-5)
        np.testing.assert_allclose(right[:, y, :].T, want, atol=1e-5)


def test_cross_diagonal_mask_selects_same_index():
    rng = Rng(15)
    c, heads, wpix = 4, 2, 4
    w = make_weights(rng, c, heads, span=8)
    mask = np.where(np.eye(wpix, dtype=bool), F32(0), F32(-np.inf))
    left_in = seeded_normal(rng, (c, 1, wpix), 1.0)
    right_in = seeded_normal(rng, (c, 1, wpix), 1.0)
    left, right, _ = cross_attention(left_in, right_in, w, heads, mask)
    for i in range(wpix):
        want_l = left_in[:, 0, i] + (right_in[:, 0, i] @ w.Wv) @ w.Wo
        np.testing.assert_allclose(left[:, 0, i], want_l, atol=1e-6)
        want_r = right_in[:, 0, i] + (left_in[:, 0, i] @ w.Wv) @ w.Wo
        np.testing.assert_allclose(right[:, 0, i], want_r, atol=1e-6)


def test_cross_matches_masked_dense_oracle():
    rng = Rng(16)
    c, heads = 1, 1
    w = make_weights(rng, c, heads, span=8)
    left_in = seeded_normal(rng, (c, 4, 4), 1.0)
    right_in = seeded_normal(rng, (c, 4, 4), 1.0)
    mask = epipolar_mask(4, 4)
    left, right, scores = cross_attention(left_in, right_in, w, heads, mask)
    for y in range(4):
        lq = left_in[:, y, :].T
        rq = right_in[:, y, :].T
        want_l = lq + dense_line_attention(lq, rq, w, heads, mask)
        want_r = rq + dense_line_attention(rq, lq, w, heads, mask.T)
        np.testing.assert_allclose(left[:, y, :].T, want_l, atol=1e-5)
        np.testing.assert_allclose(right[:, y, :].T, want_r, atol=1e-5)
    assert scores.logits.shape == (4, 4, 4)
    assert np.isneginf(scores.logits[:, 1, 0]).all()


def test_cross_scores_softmax_sums_to_one_over_unmasked():
    from cstr import softmax_axis

    rng = Rng(17)
    c, heads = 4, 2
    w = make_weights(rng, c, heads, span=8)
    f = seeded_normal(rng, (c, 3, 6), 1.0)
    g = seeded_normal(rng, (c, 3, 6), 1.0)
    mask = epipolar_mask(6, 6)
    _, _, scores = cross_attention(f, g, w, heads, mask)
    probs = softmax_axis(scores.logits, axis=2)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-6)
    assert (probs[np.isneginf(scores.logits)] == 0).all()


def test_cross_rejects_fully_masked_row():
    rng = Rng(18)
    w = make_weights(rng, 2, 1, span=8)
    f = seeded_normal(rng, (2, 1, 3), 1.0)
    mask = np.full((3, 3), -np.inf, dtype=F32)
    mask[0, 0] = 0  # rows 1..2 remain fully masked
    with pytest.raises(ValueError):
        cross_attention(f, f, w, 1, mask)


def test_cross_shape_mismatch():
    w = make_weights(Rng(19), 2, 1, span=8)
    with pytest.raises(ValueError):
        cross_attention(
            np.zeros((2, 2, 3), dtype=F32), np.zeros((2, 2, 4), dtype=F32), w, 1
        )


# --- pixel norm ---


def test_pixel_norm_zero_mean_unit_variance():
    rng = Rng(20)
    f = seeded_normal(rng, (8, 3, 4), 2.0) + 1.5
    out = pixel_norm(f)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)
