import numpy as np
import pytest

from specdraft import tree as tr
from specdraft.models import DerivedDraftModel, Distortion, random_model
from helpers import bigram, unconditional


def two_level_model():
    # after token 0 ("A") the draft puts 0.8 / 0.1 / 0.1 on the next token
    return bigram([[0.8, 0.1, 0.1], [0.3, 0.3, 0.4], [0.6, 0.4, 0.0]])


def test_expand_top_k_by_value():
    tree = tr.DraftTree.start([2])
    tr.expand_layer(tree, two_level_model(), k=1, branch=2)
    a, b = tree.layers[1]
    assert (tree.nodes[a].token, tree.nodes[a].value) == (0, 0.6)
    assert (tree.nodes[b].token, tree.nodes[b].value) == (1, 0.4)
    tr.expand_layer(tree, two_level_model(), k=1, branch=2)
    assert tree.expanded[-1] == [a]
    vals = [tree.nodes[i].value for i in tree.layers[2]]
    assert vals == pytest.approx([0.48, 0.06])
    assert all(tree.nodes[i].parent == a for i in tree.layers[2])


def test_k_larger_than_layer():
    tree = tr.build_tree([2], two_level_model(), depth=2, k=50, branch=2)
    assert tree.expanded[-1] == tree.layers[1]


def test_empty_tree_is_invalid_state():
    with pytest.raises(tr.InvalidStateError):
        tr.expand_layer(tr.DraftTree((), [], []), two_level_model(), 1, 1)


def test_depth_one_gives_top_branch():
    m = unconditional([0.1, 0.4, 0.2, 0.3])
    tree = tr.build_tree([], m, depth=1, k=10, branch=3)
    assert [tree.nodes[i].token for i in tree.layers[1]] == [1, 3, 2]


def test_layer_width_bound():
    m = random_model(12, 1, 0, 0.5)
    tree = tr.build_tree([0], m, depth=6, k=10, branch=10)
    assert all(len(layer) <= 100 for layer in tree.layers[2:])


def test_deterministic_draft_degenerates_to_chain():
    m = bigram([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    tree = tr.build_tree([0], m, depth=4, k=10, branch=3)
    assert [len(layer) for layer in tree.layers[1:]] == [1, 1, 1, 1]
    assert all(n.value == 1.0 and n.confidence == 1.0 for n in tree.nodes)


def _tree_with_values(spec):
    """spec: list of (parent_node_id, value) with node ids counted from 1."""
    tree = tr.DraftTree.start([0])
    for t, (par, val) in enumerate(spec):
        depth = tree.nodes[par].depth + 1
        tree.nodes.append(tr.DraftNode(t, val, val, par, depth, None))
        tree.nodes[par].children.append(len(tree.nodes) - 1)
        while len(tree.layers) <= depth:
            tree.layers.append([])
        tree.layers[depth].append(len(tree.nodes) - 1)
    return tree


def test_rerank_example():
    # A, B at depth 1; A1, A2 under A
    tree = _tree_with_values([(0, 0.6), (0, 0.4), (1, 0.48), (1, 0.06)])
    assert sorted(tr.rerank(tree, 3)) == [1, 2, 3]


def test_rerank_prefers_shallow_on_ties():
    tree = _tree_with_values([(0, 0.5), (0, 0.4), (1, 0.4)])
    assert tr.rerank(tree, 2) == [1, 2]


def test_flatten_mask_example():
    tree = _tree_with_values([(0, 0.6), (0, 0.4), (1, 0.48)])
    flat = tr.flatten(tree, [1, 3, 2])
    # breadth-first layout: A, B, A1
    assert flat.parents == [tr.ROOT, tr.ROOT, 0]
    np.testing.assert_array_equal(flat.mask, [[1, 0, 0], [0, 1, 0], [1, 0, 1]])


def test_flatten_rejects_disconnected():
    tree = _tree_with_values([(0, 0.6), (1, 0.5)])
    with pytest.raises(tr.InvalidStateError):
        tr.flatten(tree, [2])


def test_static_two_candidates():
    m = unconditional([0.1, 0.5, 0.4])
    flat = tr.static_tree([], m, [2])
    assert flat.tokens == [1, 2] and flat.parents == [tr.ROOT, tr.ROOT]


def test_static_chain_shape():
    m = random_model(5, 1, 2)
    flat = tr.static_tree([3], m, [1, 1, 1])
    assert len(flat) == 3 and flat.is_chain()


def test_static_deterministic():
    m = DerivedDraftModel(random_model(6, 2, 4), Distortion.parse("mix:0.3"))
    a, b = tr.static_tree([1, 2], m, [4, 4, 4]), tr.static_tree([1, 2], m, [4, 4, 4])
    assert a.tokens == b.tokens and a.parents == b.parents
    np.testing.assert_array_equal(a.mask, b.mask)


def test_static_budget_caps_nodes():
    m = random_model(6, 1, 4)
    assert len(tr.static_tree([0], m, [6, 6, 6], branch=6, budget=10)) == 10


def test_expansion_selection_connected_and_capped():
    m = DerivedDraftModel(random_model(8, 2, 1, 0.5), Distortion.parse("mix:0.3"))
    tree = tr.build_tree([0, 1], m, depth=6, k=10, branch=10)
    chosen = tr.expansion_selection(tree, 60, 10)
    assert len(chosen) <= 60
    picked = set(chosen)
    assert all(tree.nodes[i].parent == 0 or tree.nodes[i].parent in picked for i in chosen)


def test_ranks_are_by_value_within_depth():
    tree = _tree_with_values([(0, 0.3), (0, 0.7), (2, 0.2), (2, 0.5)])
    flat = tr.rerank_and_flatten(tree, 4)
    by = {(d, r): v for d, r, v in zip(flat.depths, flat.ranks, flat.values)}
    assert by == {(1, 1): 0.7, (1, 2): 0.3, (2, 1): 0.5, (2, 2): 0.2}


def test_sampled_chain_uses_callback():
    m = unconditional([0.5, 0.5])
    flat = tr.chain_draft([], m, 3, sample=lambda q: 1)
    assert flat.tokens == [1, 1, 1] and flat.sampled and flat.is_chain()
