import pytest

from mvc.tokens import NULL_ID, VOCAB, PromptTokens, negative_prompt


class TestPromptTokens:
    def test_empty_prompt_is_null_only(self):
        p = PromptTokens.empty()
        assert p.is_empty and p.ids == (NULL_ID,)

    def test_text_round_trip(self):
        p = PromptTokens.from_text("small red sphere and large blue box")
        assert p.to_text() == "small red sphere and large blue box"
        assert not p.is_empty

    def test_out_of_vocab_rejected(self):
        with pytest.raises(ValueError, match="out-of-vocabulary"):
            PromptTokens.from_text("gigantic mauve dodecahedron")

    def test_null_reserved_for_empty(self):
        with pytest.raises(ValueError):
            PromptTokens(ids=(NULL_ID, 2), is_empty=False)
        with pytest.raises(ValueError):
            PromptTokens(ids=(2,), is_empty=True)

    def test_ids_within_range(self):
        with pytest.raises(ValueError):
            PromptTokens(ids=(len(VOCAB),))

    def test_negative_prompt_in_vocabulary(self):
        p = negative_prompt()
        assert p.to_text() == "blurry low-quality"
        assert not p.is_empty
