import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlyexit.metrics import (
    MetricKind,
    dissimilarity,
    lcs_length,
    levenshtein,
    norm_edit_similarity,
    risk,
    rouge_l,
    similarity,
    token_f1,
)

seqs = st.lists(st.integers(0, 5), max_size=8)
KINDS = list(MetricKind)


A, B, C = 10, 11, 12


class TestExamples:
    def test_hand_computed(self):
        assert token_f1([A, B], [B, C]) == 0.5
        assert rouge_l([A, C], [A, B, C]) == 0.8
        assert norm_edit_similarity([A, B, C], [A, B]) == 2 / 3
        assert norm_edit_similarity([A], [B]) == 0.0
        assert token_f1([A, B], [C]) == 0.0

    def test_risk_two_references(self):
        # metric values 0.6 and 0.8 via edit similarity on length-5 sequences
        a = [1, 2, 3, 4, 5]
        refs = [[1, 2, 3, 9, 9], [1, 2, 3, 4, 9]]
        assert [similarity("edit", a, z) for z in refs] == pytest.approx([0.6, 0.8])
        assert risk("edit", a, refs) == pytest.approx(0.2, abs=1e-12)

    def test_token_f1_partial(self):
        # overlap 2, precision 2/3, recall 2/4
        assert token_f1([1, 2, 3], [1, 2, 4, 5]) == pytest.approx(4 / 7)

    def test_token_f1_counts_multiplicity(self):
        assert token_f1([1, 1, 1], [1]) == pytest.approx(0.5)

    def test_lcs(self):
        assert lcs_length([1, 2, 3, 4], [2, 4, 3]) == 2
        assert lcs_length([], [1]) == 0

    def test_rouge_l(self):
        # lcs 2, p 2/4, r 2/3
        assert rouge_l([1, 2, 3, 4], [2, 4, 3]) == pytest.approx(4 / 7)

    @pytest.mark.parametrize("a,b,expected", [([], [], 1.0), ([], [1], 0.0), ([1], [], 0.0)])
    def test_rouge_l_empty_cases(self, a, b, expected):
        assert rouge_l(a, b) == expected

    def test_levenshtein(self):
        assert levenshtein([1, 2, 3], [1, 3]) == 1
        assert levenshtein([1, 2, 3], [3, 2, 1]) == 2
        assert levenshtein([], [4, 4]) == 2

    def test_norm_edit(self):
        assert norm_edit_similarity([1, 2, 3, 4], [1, 2, 9, 4]) == pytest.approx(0.75)
        assert norm_edit_similarity([], []) == 1.0

    def test_risk_takes_best_reference(self):
        assert risk("token_f1", [1, 2], [[3], [1, 2]]) == 0.0
        assert risk("edit", [1, 2], [[3, 3]]) == 1.0

    def test_risk_needs_reference(self):
        with pytest.raises(ValueError):
            risk("rouge_l", [1], [])

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            similarity("bleu", [1], [1])


@pytest.mark.parametrize("kind", KINDS)
class TestProperties:
    @given(a=seqs, b=seqs)
    def test_bounded_and_symmetric(self, kind, a, b):
        s = similarity(kind, a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(similarity(kind, b, a))
        assert dissimilarity(kind, a, b) == pytest.approx(1.0 - s)

    @given(a=seqs)
    def test_identity(self, kind, a):
        assert similarity(kind, a, a) == 1.0

    @given(a=seqs, refs=st.lists(seqs, min_size=1, max_size=4), extra=seqs)
    def test_risk_non_increasing_in_references(self, kind, a, refs, extra):
        assert risk(kind, a, refs + [extra]) <= risk(kind, a, refs)
