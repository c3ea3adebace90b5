import numpy as np
import pytest

from gisplab import autodiff as ad
from gisplab import data_eval as D
from gisplab import importance as I
from gisplab import model as M

from conftest import small_config


@pytest.fixture(scope="module")
def calib(tiny_corpus):
    return D.sample_calibration(tiny_corpus, 8, 16, seed=0)


@pytest.fixture(scope="module")
def grads(small_weights, calib):
    obj = I.Objective(D.PERPLEXITY, calib)
    masks = M.MaskState.dense(small_weights.config)
    return I.gradients_for_objective(small_weights, masks, obj)


def test_element_importance_direct_product(small_weights):
    grads = {name: np.zeros_like(a) for name, a in
             small_weights.named_parameters()}
    grads["final_norm"][:2] = [0.5, 1.0]
    w = small_weights.copy()
    w.final_norm[:2] = [2.0, -3.0]
    scores = I.element_importance(grads, w)
    assert scores["final_norm"][0] == 1.0
    assert scores["final_norm"][1] == 3.0
    assert np.all(scores["token_emb"] == 0.0)


def test_element_importance_shape_mismatch(small_weights):
    grads = {name: np.zeros_like(a) for name, a in
             small_weights.named_parameters()}
    grads["final_norm"] = np.zeros(3)
    with pytest.raises(ValueError, match="shape mismatch"):
        I.element_importance(grads, small_weights)


def test_element_importance_scales_with_loss(small_weights, grads):
    scores = I.element_importance(grads, small_weights)
    scaled = I.element_importance({k: 2.5 * v for k, v in grads.items()},
                                  small_weights)
    for k in scores:
        assert np.allclose(scaled[k], 2.5 * scores[k])


def test_perplexity_gradient_on_one_sequence_is_plain_backward(small_weights):
    seq = np.random.default_rng(0).integers(0, 256, size=(1, 10))
    cal = D.CalibrationSet(kind=D.PERPLEXITY, sequences=seq)
    masks = M.MaskState.dense(small_weights.config)
    got = I.gradients_for_objective(small_weights, masks,
                                    I.Objective(D.PERPLEXITY, cal))
    g, handles = M.build_loss_graph(small_weights, seq, masks)
    ad.evaluate(g)
    want = ad.backward(g, handles["loss"])
    for k in want:
        assert np.array_equal(got[k], want[k])


def test_margin_identical_batches_give_exact_zero(small_weights):
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 256, size=(3, 12))
    mask = np.zeros((3, 11))
    mask[:, 4:] = 1.0
    masks = M.MaskState.dense(small_weights.config)
    grads = I.margin_gradients(small_weights, masks, (tokens, mask),
                               (tokens.copy(), mask.copy()))
    for k, v in grads.items():
        assert np.all(v == 0.0), k


def test_margin_equals_two_pass_difference(tiny_trained):
    items = D.make_synthetic_qa(count=4, seed=2)
    obj = I.Objective(D.MARGIN, D.CalibrationSet(D.MARGIN, items=items))
    masks = M.MaskState.dense(tiny_trained.config)
    got = I.gradients_for_objective(tiny_trained, masks, obj)

    # oracle: one combined graph per side-pair via scaled loss difference
    (pos, pos_mask), (neg, neg_mask) = D.build_margin_batches(items)
    acc = {}
    for tokens, mask, sign in ((pos, pos_mask, 1.0), (neg, neg_mask, -1.0)):
        g, handles = M.build_loss_graph(tiny_trained, tokens, masks,
                                        position_weights=mask / mask.sum())
        ad.evaluate(g)
        part = ad.backward(g, handles["loss"])
        for k, v in part.items():
            acc[k] = acc.get(k, 0.0) + sign * v
    for k in acc:
        assert np.max(np.abs(got[k] - acc[k])) < 1e-12


def test_margin_requires_negatives():
    with pytest.raises(ValueError):
        D.CalibrationSet(kind=D.MARGIN, items=[])


def test_aggregate_counts_with_unit_scores(small_weights):
    cfg = small_weights.config
    ones = {name: np.ones_like(a) for name, a in
            small_weights.named_parameters()}
    raw = I.aggregate(ones, cfg)
    assert raw[M.StructureId(0, M.ATTN_HEAD, 0)] == 4 * cfg.d_head * cfg.d_model
    assert raw[M.StructureId(1, M.MLP_CHANNEL, 3)] == 3 * cfg.d_model


def test_aggregate_zero_gradients(small_weights):
    zeros = {name: np.zeros_like(a) for name, a in
             small_weights.named_parameters()}
    raw = I.aggregate(zeros, small_weights.config)
    assert all(v == 0.0 for v in raw.values())


def test_aggregate_matches_index_enumeration(small_weights, grads):
    cfg = small_weights.config
    scores = I.element_importance(grads, small_weights)
    raw = I.aggregate(scores, cfg)
    dh = cfg.d_head
    # brute force: explicit element loops for one head and one channel
    sid = M.StructureId(1, M.ATTN_HEAD, 2)
    total = 0.0
    for name in ("wq", "wk", "wv"):
        arr = scores[f"layers.1.{name}"]
        for r in range(2 * dh, 3 * dh):
            for c in range(cfg.d_model):
                total += arr[r, c]
    arr = scores["layers.1.wo"]
    for r in range(cfg.d_model):
        for c in range(2 * dh, 3 * dh):
            total += arr[r, c]
    assert raw[sid] == pytest.approx(total, rel=1e-12)

    sid = M.StructureId(0, M.MLP_CHANNEL, 5)
    total = sum(scores["layers.0.w_gate"][5, c] for c in range(cfg.d_model))
    total += sum(scores["layers.0.w_up"][5, c] for c in range(cfg.d_model))
    total += sum(scores["layers.0.w_down"][r, 5] for r in range(cfg.d_model))
    assert raw[sid] == pytest.approx(total, rel=1e-12)


def test_normalize_pools_mean_division():
    cfg = M.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=2,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    raw = {M.StructureId(0, M.ATTN_HEAD, 0): 1.0,
           M.StructureId(0, M.ATTN_HEAD, 1): 3.0,
           M.StructureId(0, M.MLP_CHANNEL, 0): 10.0,
           M.StructureId(0, M.MLP_CHANNEL, 1): 30.0}
    normalized, attn_mean, mlp_mean = I.normalize_pools(raw, masks)
    assert attn_mean == 2.0 and mlp_mean == 20.0
    assert normalized[M.StructureId(0, M.ATTN_HEAD, 0)] == 0.5
    assert normalized[M.StructureId(0, M.ATTN_HEAD, 1)] == 1.5
    assert normalized[M.StructureId(0, M.MLP_CHANNEL, 0)] == 0.5
    assert normalized[M.StructureId(0, M.MLP_CHANNEL, 1)] == 1.5


def test_normalize_pools_single_structure_pool():
    cfg = M.ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ff=2,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    raw = {M.StructureId(0, M.ATTN_HEAD, 0): 7.7,
           M.StructureId(0, M.MLP_CHANNEL, 0): 0.4,
           M.StructureId(0, M.MLP_CHANNEL, 1): 0.6}
    normalized, _, _ = I.normalize_pools(raw, masks)
    assert normalized[M.StructureId(0, M.ATTN_HEAD, 0)] == 1.0


def test_normalize_pools_unit_means(small_weights, grads):
    masks = M.MaskState.dense(small_weights.config)
    raw = I.aggregate(I.element_importance(grads, small_weights),
                      small_weights.config)
    normalized, _, _ = I.normalize_pools(raw, masks)
    heads = [v for s, v in normalized.items() if s.kind == M.ATTN_HEAD]
    chans = [v for s, v in normalized.items() if s.kind == M.MLP_CHANNEL]
    assert abs(np.mean(heads) - 1.0) < 1e-12
    assert abs(np.mean(chans) - 1.0) < 1e-12


def test_normalize_pools_excludes_removed(small_weights, grads):
    cfg = small_weights.config
    masks = M.MaskState.dense(cfg)
    victim = M.StructureId(0, M.ATTN_HEAD, 0)
    masks.remove(victim)
    raw = I.aggregate(I.element_importance(grads, small_weights), cfg)
    normalized, attn_mean, _ = I.normalize_pools(raw, masks)
    assert victim not in normalized
    kept_heads = [raw[s] for s in raw
                  if s.kind == M.ATTN_HEAD and s != victim]
    assert attn_mean == pytest.approx(np.mean(kept_heads), rel=1e-12)


def test_normalize_pools_degenerate_error():
    cfg = M.ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ff=1,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    raw = {M.StructureId(0, M.ATTN_HEAD, 0): 0.0,
           M.StructureId(0, M.MLP_CHANNEL, 0): 0.0}
    with pytest.raises(I.DegeneratePoolError):
        I.normalize_pools(raw, masks)


def test_rank_filters_protected_and_sorts():
    cfg = M.ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=2,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    normalized = {}
    rng = np.random.default_rng(0)
    for sid in M.enumerate_structures(cfg):
        normalized[sid] = float(rng.random())
    order = I.rank_prunable(normalized, masks, protected={0})
    assert all(s.layer != 0 for s in order)
    scores = [normalized[s] for s in order]
    assert scores == sorted(scores)
    # independent sort oracle
    expected = sorted((s for s in normalized if s.layer != 0),
                      key=lambda s: (normalized[s], s))
    assert order == expected


def test_rank_tie_breaks_by_layer():
    cfg = M.ModelConfig(n_layers=3, n_heads=2, d_model=8, d_ff=2,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    normalized = {sid: 1.0 for sid in M.enumerate_structures(cfg)}
    order = I.rank_prunable(normalized, masks, protected=set())
    assert order[0] == M.StructureId(0, M.ATTN_HEAD, 0)
    assert order == sorted(order)


def test_rank_skips_floor_violations():
    cfg = M.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=2,
                        max_seq_len=8)
    masks = M.MaskState.dense(cfg)
    masks.remove(M.StructureId(0, M.ATTN_HEAD, 0))
    normalized = {s: 1.0 for s in M.enumerate_structures(cfg)
                  if masks.is_kept(s)}
    order = I.rank_prunable(normalized, masks, protected=set())
    assert all(s.kind != M.ATTN_HEAD for s in order)


def test_ranking_invariant_to_loss_scale(small_weights, grads):
    cfg = small_weights.config
    masks = M.MaskState.dense(cfg)
    raw = I.aggregate(I.element_importance(grads, small_weights), cfg)
    scaled_raw = I.aggregate(
        I.element_importance({k: 7.3 * v for k, v in grads.items()},
                             small_weights), cfg)
    a, _, _ = I.normalize_pools(raw, masks)
    b, _, _ = I.normalize_pools(scaled_raw, masks)
    assert (I.rank_prunable(a, masks, frozenset())
            == I.rank_prunable(b, masks, frozenset()))


def test_report_deterministic_and_serializable(small_weights, calib):
    masks = M.MaskState.dense(small_weights.config)
    obj = I.Objective(D.PERPLEXITY, calib)
    r1 = I.compute_report(small_weights, masks, obj, iteration=3)
    r2 = I.compute_report(small_weights, masks, obj, iteration=3)
    assert r1.to_json_line() == r2.to_json_line()
    import json
    parsed = json.loads(r1.to_json_line())
    assert parsed["iteration"] == 3
    assert len(parsed["raw"]) == len(M.enumerate_structures(
        small_weights.config))


def test_objective_kind_validation(calib):
    with pytest.raises(ValueError, match="unknown objective"):
        I.Objective("nonsense", calib)
    with pytest.raises(ValueError, match="does not match"):
        I.Objective(D.MARGIN, calib)
