"""Synthetic transduction corpus: semantics oracle, splits, files."""

import pytest

from spantree import datasets, trees
from spantree.datasets import (
    BINARY_OPS,
    LEAF,
    RESERVED,
    UNARY_OPS,
    Corpus,
    TransductionExample,
    Vocab,
)
from spantree.errors import ContractViolation


def oracle_eval(tokens):
    """Independent prefix-notation evaluator, written without touching the
    generator's internals.  Returns (value, list of (parent, child-head) pairs
    at the outermost node)."""
    pos = 0

    def parse():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok in UNARY_OPS or tok in BINARY_OPS:
            arity = 1 if tok in UNARY_OPS else 2
            args, heads = [], []
            for _ in range(arity):
                heads.append(tokens[pos] if tokens[pos] in datasets.ALL_OPS else LEAF)
                sub_value, _ = parse()
                args.append(sub_value)
            if tok == "copy":
                val = list(args[0])
            elif tok == "reverse":
                val = args[0][::-1]
            elif tok == "shift":
                val = args[0][1:] + args[0][:1]
            elif tok == "repeat":
                val = args[0] + args[0]
            elif tok == "append":
                val = args[0] + args[1]
            elif tok == "interleave_first":
                assert len(args[0]) == len(args[1])
                val = [x for pair in zip(args[0], args[1]) for x in pair]
            else:  # interleave_second
                assert len(args[0]) == len(args[1])
                val = [x for a, b in zip(args[0], args[1]) for x in (b, a)]
            return val, heads
        # leaf: two consecutive symbols
        nxt = tokens[pos]
        pos += 1
        return [tok, nxt], []

    value, heads = parse()
    assert pos == len(tokens), "trailing tokens"
    return value, heads


def test_generated_targets_match_independent_evaluator():
    for ex in datasets.generate_expressions(300, depth_range=(1, 3), seed=5):
        value, _ = oracle_eval(ex.source)
        assert ex.target == value


def test_generated_head_pairs_match_independent_parse():
    for ex in datasets.generate_expressions(200, depth_range=(1, 3), seed=6):
        _, heads = oracle_eval(ex.source)
        assert ex.head_pairs == tuple((ex.source[0], h) for h in heads)


def test_interleave_second_reference_example():
    value, _ = oracle_eval(["interleave_second", "A", "B", "C", "D"])
    assert value == ["C", "A", "D", "B"]
    # and the generator's own semantics agree
    assert datasets._apply_binary("interleave_second", ["A", "B"], ["C", "D"]) == [
        "C", "A", "D", "B",
    ]


def test_unary_semantics():
    assert datasets._apply_unary("copy", ["a", "b"]) == ["a", "b"]
    assert datasets._apply_unary("reverse", ["a", "b", "c"]) == ["c", "b", "a"]
    assert datasets._apply_unary("shift", ["a", "b", "c"]) == ["b", "c", "a"]
    assert datasets._apply_unary("repeat", ["a", "b"]) == ["a", "b", "a", "b"]


def test_interleave_rejects_unequal_lengths():
    with pytest.raises(ContractViolation):
        datasets._apply_binary("interleave_first", ["a"], ["b", "c"])


def test_gold_trees_cover_sources():
    for ex in datasets.generate_expressions(100, depth_range=(1, 3), seed=7):
        trees.validate_tree(ex.tree, len(ex.source))


def test_generation_is_deterministic():
    a = datasets.generate_expressions(50, depth_range=(1, 2), seed=11)
    b = datasets.generate_expressions(50, depth_range=(1, 2), seed=11)
    assert [(x.source, x.target, x.tree) for x in a] == [
        (x.source, x.target, x.tree) for x in b
    ]
    c = datasets.generate_expressions(50, depth_range=(1, 2), seed=12)
    assert [x.source for x in a] != [x.source for x in c]


def test_generation_contracts():
    with pytest.raises(ContractViolation):
        datasets.generate_expressions(0)
    with pytest.raises(ContractViolation):
        datasets.generate_expressions(5, depth_range=(0, 2))
    with pytest.raises(ContractViolation):
        datasets.generate_expressions(5, depth_range=(3, 2))


def test_depth_range_respected():
    # depth 1 means exactly one op
    for ex in datasets.generate_expressions(50, depth_range=(1, 1), seed=8):
        n_ops = sum(tok in datasets.ALL_OPS for tok in ex.source)
        assert n_ops >= 1


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocab_reserved_prefix_and_ids():
    v = Vocab(["x", "y"])
    assert v.id_to_token[:5] == list(RESERVED)
    assert (v.pad, v.bos, v.eos, v.mask, v.unk) == (0, 1, 2, 3, 4)
    assert v.encode(["x", "zzz"]) == [5, v.unk]
    assert v.decode([5, 6]) == ["x", "y"]


def test_vocab_dedupes_and_keeps_order():
    v = Vocab(["b", "a", "b", "c", "a"])
    assert v.id_to_token[5:] == ["b", "a", "c"]


def test_vocab_reserved_tokens_not_duplicated():
    v = Vocab(["<pad>", "x"])
    assert v.id_to_token.count("<pad>") == 1


# ---------------------------------------------------------------------------
# compositional splits
# ---------------------------------------------------------------------------


def test_cg_split_holds_out_unseen_pairs():
    examples = datasets.generate_expressions(800, depth_range=(1, 3), seed=9)
    corpus = datasets.make_cg_split(examples, datasets.DEFAULT_UNSEEN, seed=1)
    unseen = {tuple(p) for p in datasets.DEFAULT_UNSEEN}
    assert corpus.cg_test, "holdout should catch some examples at depth <= 3"
    for ex in corpus.cg_test:
        assert any(p in unseen for p in ex.head_pairs)
    for ex in corpus.train + corpus.iid_val:
        assert not any(p in unseen for p in ex.head_pairs)
    # partition: nothing lost
    total = len(corpus.train) + len(corpus.iid_val) + len(corpus.cg_test)
    assert total == len(examples)


def test_cg_split_val_fraction_and_determinism():
    examples = datasets.generate_expressions(400, depth_range=(1, 2), seed=10)
    c1 = datasets.make_cg_split(examples, datasets.DEFAULT_UNSEEN, seed=3, val_frac=0.2)
    c2 = datasets.make_cg_split(examples, datasets.DEFAULT_UNSEEN, seed=3, val_frac=0.2)
    kept = len(c1.train) + len(c1.iid_val)
    assert len(c1.iid_val) == round(kept * 0.2)
    assert [x.source for x in c1.train] == [x.source for x in c2.train]
    assert [x.source for x in c1.iid_val] == [x.source for x in c2.iid_val]


def test_cg_split_vocab_from_train_only():
    examples = [
        TransductionExample(["copy", "A", "B"], ["A", "B"], None, (("copy", LEAF),)),
        TransductionExample(
            ["repeat", "reverse", "Z", "Q"],
            ["Q", "Z", "Q", "Z"],
            None,
            (("repeat", "reverse"),),
        ),
    ]
    corpus = datasets.make_cg_split(examples, [("repeat", "reverse")], val_frac=0.0)
    assert len(corpus.cg_test) == 1
    assert "Z" not in corpus.vocab.token_to_id  # held-out symbols stay unknown
    assert "copy" in corpus.vocab.token_to_id


def test_cg_split_empty_train_rejected():
    examples = [
        TransductionExample(["copy", "A", "B"], ["A", "B"], None, (("copy", LEAF),))
    ]
    with pytest.raises(ContractViolation):
        datasets.make_cg_split(examples, [("copy", LEAF)])


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def test_tsv_round_trip(tmp_path):
    examples = datasets.generate_expressions(40, depth_range=(1, 2), seed=13)
    path = tmp_path / "data.tsv"
    datasets.write_tsv(examples, path)
    loaded = datasets.load_tsv(path)
    assert [(x.source, x.target, x.tree) for x in loaded] == [
        (x.source, x.target, x.tree) for x in examples
    ]


def test_tsv_without_trees(tmp_path):
    path = tmp_path / "plain.tsv"
    path.write_text("a b\tb a\n\nx y\tx y\n")
    loaded = datasets.load_tsv(path)
    assert len(loaded) == 2
    assert loaded[0].tree is None


def test_tsv_errors_name_lines(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a b\tb a\tc d\te\n")  # 4 columns
    with pytest.raises(ContractViolation, match=":1:"):
        datasets.load_tsv(bad)
    bad.write_text("a b\tb a\n\ta\n")  # empty source on line 2
    with pytest.raises(ContractViolation, match=":2:"):
        datasets.load_tsv(bad)
    bad.write_text("a b\tb a\t(a b\n")  # malformed tree
    with pytest.raises(ContractViolation, match=":1:"):
        datasets.load_tsv(bad)
    bad.write_text("a b c\tx\t(a b)\n")  # tree covers 2 of 3 tokens
    with pytest.raises(ContractViolation, match="covers 2"):
        datasets.load_tsv(bad)


def test_corpus_save_load_round_trip(tmp_path):
    examples = datasets.generate_expressions(200, depth_range=(1, 2), seed=14)
    corpus = datasets.make_cg_split(examples, datasets.DEFAULT_UNSEEN, seed=0)
    datasets.save_corpus(corpus, tmp_path / "corpus")
    loaded = datasets.load_corpus(tmp_path / "corpus")
    for split in ("train", "iid_val", "cg_test"):
        assert [x.source for x in loaded.splits()[split]] == [
            x.source for x in corpus.splits()[split]
        ]
    # vocabulary reconstructed from train identically
    assert loaded.vocab.id_to_token == corpus.vocab.id_to_token


def test_load_corpus_requires_train(tmp_path):
    (tmp_path / "iid_val.tsv").write_text("a b\tb a\n")
    with pytest.raises(ContractViolation):
        datasets.load_corpus(tmp_path)
