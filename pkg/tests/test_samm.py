import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from semvq.samm import MaskScorer, SemanticMaskScorer, n_keep, scale_selected, select_topn


def test_topn_example():
    alpha = torch.tensor([0.9, 0.1, 0.8, 0.2, 0.3, 0.4, 0.5, 0.6])
    sel = select_topn(alpha, 0.25)
    assert int(sel.selected.sum()) == 2
    assert sel.selected.nonzero().flatten().tolist() == [0, 2]


def test_keep_counts():
    assert n_keep(0.2, 512) == 102
    assert n_keep(1.0, 37) == 37
    assert n_keep(0.001, 10) == 1
    assert n_keep(0.35, 20) == 7
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(ValueError):
            n_keep(bad, 10)


def test_all_selected_at_full_fraction():
    sel = select_topn(torch.rand(3, 17), 1.0)
    assert sel.selected.all()


@given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_selection_size_and_nesting(seed, K, m1, m2):
    g = torch.Generator().manual_seed(seed)
    # coarse scores make ties common
    alpha = torch.randint(0, 4, (2, K), generator=g).float() / 3
    lo, hi = sorted((m1, m2))
    a, b = select_topn(alpha, lo), select_topn(alpha, hi)
    assert (a.selected.sum(1) == max(1, int(np.floor(lo * K + 1e-9)))).all()
    assert not (a.selected & ~b.selected).any()
    assert torch.equal(select_topn(alpha, lo).selected, a.selected)


def test_selection_prefers_high_scores():
    alpha = torch.rand(4, 40)
    sel = select_topn(alpha, 0.3)
    for b in range(4):
        assert alpha[b][sel.selected[b]].min() >= alpha[b][~sel.selected[b]].max()


def test_scaling_examples():
    z = torch.full((1, 2, 1, 2), 2.0)
    sel = select_topn(torch.tensor([[0.5, 0.2]]), 0.5)
    out = scale_selected(z, sel)
    assert out[0, :, 0, 0].tolist() == [1.0, 1.0]
    assert out[0, :, 0, 1].tolist() == [0.0, 0.0]
    ones = select_topn(torch.ones(1, 2), 1.0)
    assert torch.equal(scale_selected(z, ones), z)


def onehot(labels, n):
    return torch.nn.functional.one_hot(labels, n).permute(0, 3, 1, 2).float()


def test_scores_in_unit_interval_and_zero_weights_give_half():
    scorer = SemanticMaskScorer(8, 5, hidden=6, spade_hidden=4)
    z = torch.randn(2, 8, 2, 3) * 10
    s = onehot(torch.randint(0, 5, (2, 32, 48)), 5)
    a = scorer(z, s)
    assert a.shape == (2, 6) and torch.isfinite(a).all() and (a >= 0).all() and (a <= 1).all()
    for p in scorer.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(scorer(z, s), torch.full((2, 6), 0.5))


def test_scores_depend_on_semantic_map():
    torch.manual_seed(0)
    scorer = SemanticMaskScorer(8, 5, hidden=6, spade_hidden=4)
    z = torch.randn(4, 8, 2, 3)
    diffs = []
    for _ in range(5):
        s1 = onehot(torch.randint(0, 5, (4, 32, 48)), 5)
        s2 = onehot(torch.randint(0, 5, (4, 32, 48)), 5)
        diffs.append((scorer(z, s1) - scorer(z, s2)).abs().max().item())
    assert min(diffs) > 0


def test_semantic_scorer_checks_alignment():
    scorer = SemanticMaskScorer(8, 5, hidden=6, spade_hidden=4)
    with pytest.raises(ValueError):
        scorer(torch.randn(1, 8, 2, 3), onehot(torch.zeros(1, 16, 48, dtype=torch.long), 5))
    with pytest.raises(ValueError):
        scorer(torch.randn(1, 8, 2, 3))


def test_constant_map_and_zero_projection_reduce_to_baseline():
    torch.manual_seed(1)
    base = MaskScorer(8, hidden=6)
    sem = SemanticMaskScorer(8, 5, hidden=6, spade_hidden=4)
    for name in ("conv1", "conv2", "head"):
        getattr(sem, name).load_state_dict(getattr(base, name).state_dict())
    sem.spade1.zero_projection()
    sem.spade2.zero_projection()
    z = torch.randn(2, 8, 2, 3)
    s = onehot(torch.full((2, 32, 48), 3), 5)
    assert torch.equal(base(z), sem(z, s))


def test_score_path_gradient_matches_finite_differences():
    torch.manual_seed(2)
    scorer = SemanticMaskScorer(4, 3, hidden=4, spade_hidden=4).double()
    z = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    s = onehot(torch.randint(0, 3, (1, 64, 64)), 3).double()
    target = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    sel = select_topn(scorer(z, s), 0.5).selected

    def loss(weight):
        scorer.head.weight.data.copy_(weight)
        a = scorer(z, s)
        w = (a * sel).reshape(1, 1, 4, 4)
        return ((z * w - target) ** 2).sum()

    w0 = scorer.head.weight.detach().clone()
    scorer.zero_grad()
    loss(w0).backward()
    analytic = scorer.head.weight.grad.clone()
    numeric = central_difference(loss, w0)
    assert analytic.abs().max() > 0
    assert relative_error(analytic, numeric) < 1e-4
