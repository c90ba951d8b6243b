import json
import os

import pytest

from mmtune.dataset import (CaptionRecord, InstructionExample,
                            MockGenerationClient, build_prompt,
                            format_stats_table, generate_examples, mix,
                            parse_qa_pairs, prompt_key, read_captions,
                            read_examples, stats, write_examples)
from mmtune.errors import (ClientError, EmptyCaption, EmptyDataset,
                           NoPairsFound, SchemaError, SourceTooSmall)

DATA = os.path.join(os.path.dirname(__file__), "data")


def caption(kind="image", cid="c1", text="A man paddles a kayak."):
    return CaptionRecord(id=cid, media=({"kind": kind, "path": f"{cid}.bin"},),
                         caption=text, source="COCO")


class TestBuildPrompt:
    def test_contains_ten_pairs_phrase(self):
        assert "ten pairs of instructions and responses" in build_prompt(caption())

    def test_kind_wording(self):
        assert "caption of an image:" in build_prompt(caption("image"))
        assert "caption of a video:" in build_prompt(caption("video"))
        assert "image" not in build_prompt(caption("video")).split(
            "Please ensure")[0]

    def test_caption_substituted(self):
        p = build_prompt(caption(text="A dog on a field."))
        assert "A dog on a field." in p

    def test_qa_line_format_instructions(self):
        p = build_prompt(caption())
        assert 'start with "Q:"' in p
        assert 'start with "A:"' in p

    def test_empty_caption(self):
        with pytest.raises(EmptyCaption):
            build_prompt(caption(text="   "))


CANONICAL_DIALOGUE = """Q: Can you describe the color of the river in the image?
A: The river in the image appears to be a tranquil shade of blue.

Q: What type of boat is the man in the image paddling?
A: The man in the image is paddling a kayak.

Q: How do you think the man in the image is feeling while paddling down the river?
A: Judging by the peaceful surroundings and the calm pace of the paddling, it's likely that the man in the image is feeling relaxed and at ease.
"""


class TestParseQaPairs:
    def test_canonical_form(self):
        assert parse_qa_pairs("Q: a\nA: b\n\nQ: c\nA: d") == [("a", "b"), ("c", "d")]

    def test_dialogue_first_pair(self):
        pairs = parse_qa_pairs(CANONICAL_DIALOGUE)
        assert pairs[0] == (
            "Can you describe the color of the river in the image?",
            "The river in the image appears to be a tranquil shade of blue.")
        assert len(pairs) == 3

    def test_no_pairs(self):
        with pytest.raises(NoPairsFound):
            parse_qa_pairs("no markers here")

    def test_interleaved_prose_breaks_pair(self):
        with pytest.raises(NoPairsFound):
            parse_qa_pairs("Q: a\nsome prose\nA: b")

    @pytest.mark.parametrize("n", range(1, 16))
    def test_cap_at_ten(self, n):
        text = "\n".join(f"Q: q{i}\nA: a{i}" for i in range(n))
        assert len(parse_qa_pairs(text)) == min(n, 10)


class TestGenerateExamples:
    def test_five_captions_fifty_examples(self):
        caps = read_captions(os.path.join(DATA, "captions.jsonl"))
        client = MockGenerationClient(os.path.join(DATA, "fixtures"))
        examples, report = generate_examples(caps, client)
        assert len(examples) == 50
        assert report.count() == 0

    def test_matches_golden_jsonl(self, tmp_path):
        caps = read_captions(os.path.join(DATA, "captions.jsonl"))
        client = MockGenerationClient(os.path.join(DATA, "fixtures"))
        examples, _ = generate_examples(caps, client)
        out = tmp_path / "built.jsonl"
        write_examples(str(out), examples)
        golden = open(os.path.join(DATA, "golden_build.jsonl"), "rb").read()
        assert out.read_bytes() == golden

    def test_idempotent(self):
        caps = read_captions(os.path.join(DATA, "captions.jsonl"))
        client = MockGenerationClient(os.path.join(DATA, "fixtures"))
        a, _ = generate_examples(caps, client)
        b, _ = generate_examples(caps, client)
        assert a == b

    def test_malformed_completion_skipped(self, tmp_path):
        caps = read_captions(os.path.join(DATA, "captions.jsonl"))
        fixdir = tmp_path / "fixtures"
        fixdir.mkdir()
        import shutil
        for f in os.listdir(os.path.join(DATA, "fixtures")):
            shutil.copy(os.path.join(DATA, "fixtures", f), fixdir / f)
        # corrupt one caption's completion
        bad_key = prompt_key(build_prompt(caps[0]))
        (fixdir / f"{bad_key}.txt").write_text("nothing to parse here")
        examples, report = generate_examples(caps, MockGenerationClient(str(fixdir)))
        assert len(examples) == 40
        assert report.count() == 1
        assert report.skipped[0][0] == caps[0].id

    def test_client_error_carries_partials(self, tmp_path):
        caps = read_captions(os.path.join(DATA, "captions.jsonl"))
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ClientError) as exc:
            generate_examples(caps, MockGenerationClient(str(empty)),
                              max_retries=1)
        assert exc.value.partial == []

    def test_retries_then_success(self):
        calls = {"n": 0}

        class Flaky(MockGenerationClient):
            def __init__(self):
                self.fixtures_dir = "unused"

            def complete(self, prompt, **kw):
                calls["n"] += 1
                if calls["n"] < 3:
                    raise ClientError("transient")
                return "Q: q\nA: a"

        examples, _ = generate_examples([caption()], Flaky(), max_retries=2)
        assert len(examples) == 1
        assert calls["n"] == 3


def ex(i, source="s", instruction="what is this", response="a thing"):
    return InstructionExample(id=f"e{i}", media=({"kind": "image", "path": "p"},),
                              instruction=instruction, response=response,
                              source=source)


class TestMix:
    def test_full_take_is_permutation(self):
        srcs = {"a": [ex(i, "a") for i in range(5)],
                "b": [ex(i + 10, "b") for i in range(5)]}
        out = mix(srcs, 5, seed=1)
        assert sorted(e.id for e in out) == sorted(
            e.id for e in srcs["a"] + srcs["b"])

    def test_deterministic(self):
        srcs = {"a": [ex(i, "a") for i in range(20)]}
        assert mix(srcs, 10, seed=3) == mix(srcs, 10, seed=3)

    def test_source_too_small(self):
        with pytest.raises(SourceTooSmall):
            mix({"a": [ex(i) for i in range(49)]}, 50, seed=0)

    def test_size_and_no_duplicates(self):
        srcs = {"a": [ex(i, "a") for i in range(30)],
                "b": [ex(i + 100, "b") for i in range(40)]}
        out = mix(srcs, 25, seed=9)
        assert len(out) == 50
        assert len({e.id for e in out}) == 50


class TestStats:
    def test_hand_computed_average(self):
        examples = [ex(0, instruction="one two three four"),
                    ex(1, instruction="one two three four five six")]
        table = stats(examples)
        assert table["s"]["items"] == 2
        assert table["s"]["ins_len"] == 5.0

    def test_table_layout(self):
        text = format_stats_table(stats([ex(0), ex(1, "t")]))
        header = text.splitlines()[0]
        for col in ("Dataset", "Items", "Ins. Len.", "Res. Len."):
            assert col in header

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            stats([])


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        examples = [ex(i) for i in range(3)]
        p = str(tmp_path / "x.jsonl")
        write_examples(p, examples)
        assert read_examples(p) == examples

    def test_schema_errors(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"id": "x", "source": "s"}) + "\n")
        with pytest.raises(SchemaError):
            read_examples(str(p))
        p.write_text("{not json\n")
        with pytest.raises(SchemaError):
            read_examples(str(p))

    def test_text_only_examples_allowed(self, tmp_path):
        # text instruction data travels through the same schema with no media
        rec = {"id": "t1", "source": "alpaca", "media": [],
               "instruction": "say hi", "response": "hi"}
        p = tmp_path / "t.jsonl"
        p.write_text(json.dumps(rec) + "\n")
        loaded = read_examples(str(p))
        assert loaded[0].media == ()
