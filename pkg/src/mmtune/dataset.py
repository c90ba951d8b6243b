"""Caption-to-instruction dataset pipeline.

Captions go into a fixed prompt template, a generation service returns
Q:/A: pairs, and each parsed pair becomes one training example carrying the
caption's media references. The service is abstracted behind a client
interface; the shipped implementation is an offline mock that replays
fixture completions keyed by prompt hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import (ClientError, EmptyCaption, EmptyDataset, NoPairsFound,
                     SchemaError, SourceTooSmall)

FIXTURES_ENV = "MACAW_FIXTURES"

MAX_PAIRS_PER_COMPLETION = 10

_PROMPT_TEMPLATE = (
    "This is the caption of {article} {kind}: {caption}. This {kind} contains "
    "important information that needs to be conveyed through high-quality "
    "instructions.\n\n"
    "Your task is to provide ten pairs of instructions and responses that are "
    "related to the content of the {kind} caption like dialogue concentrating "
    "on the content of the {kind} without explicitly mentioning the caption "
    "or the word 'caption'.\n\n"
    "Your focus should be on describing, explaining, or analyzing various "
    "aspects of the {kind}, as well as providing some QA pairs. The purpose "
    "of this exercise is to fine-tune a language model so that it can "
    "generate accurate and relevant responses.\n\n"
    "In each pair, the first line should start with \"Q:\" and contain an "
    "instruction related to the {kind}, while the second line should start "
    "with \"A:\" and provide a response to the instruction.\n\n"
    "Please ensure that your instructions are diverse and of high quality, "
    "accurately reflecting the content of the image and providing useful "
    "information to the language model:")


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    media: tuple            # dicts: {kind, path, frames?}
    caption: str
    source: str

    def primary_kind(self) -> str:
        return self.media[0]["kind"]


@dataclass(frozen=True)
class InstructionExample:
    id: str
    media: tuple
    instruction: str
    response: str
    source: str

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source,
                "media": [dict(m) for m in self.media],
                "instruction": self.instruction, "response": self.response}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionExample":
        for key in ("id", "source", "media", "instruction", "response"):
            if key not in d:
                raise SchemaError(f"example record missing key {key!r}")
        if not d["instruction"] or not d["response"]:
            raise SchemaError(f"example {d['id']!r}: empty instruction or response")
        return cls(id=str(d["id"]), media=tuple(_check_media(d["media"], d["id"])),
                   instruction=d["instruction"], response=d["response"],
                   source=str(d["source"]))


def _check_media(media, owner) -> list:
    out = []
    for m in media:
        if "kind" not in m or "path" not in m:
            raise SchemaError(f"record {owner!r}: media entry needs kind and path")
        if m["kind"] not in ("image", "video", "audio"):
            raise SchemaError(f"record {owner!r}: unknown media kind {m['kind']!r}")
        out.append(dict(m))
    return out


def build_prompt(caption: CaptionRecord) -> str:
    """Fill the generation prompt, choosing image/video wording by kind."""
    if not caption.caption.strip():
        raise EmptyCaption(f"caption {caption.id!r} is empty")
    kind = "video" if caption.primary_kind() in ("video", "audio") else "image"
    article = "a" if kind == "video" else "an"
    return _PROMPT_TEMPLATE.format(article=article, kind=kind,
                                   caption=caption.caption.strip())


def parse_qa_pairs(completion: str) -> list:
    """Extract up to 10 (instruction, response) pairs from Q:/A: lines."""
    pairs = []
    pending = None
    for line in completion.splitlines():
        s = line.strip()
        if s.startswith("Q:"):
            pending = s[2:].strip()
        elif s.startswith("A:") and pending is not None:
            answer = s[2:].strip()
            if pending and answer:
                pairs.append((pending, answer))
            pending = None
        elif s:
            pending = None  # interleaved prose breaks the pair
    if not pairs:
        raise NoPairsFound("no Q:/A: pairs in completion")
    return pairs[:MAX_PAIRS_PER_COMPLETION]


def prompt_key(prompt: str) -> str:
    """Filename stem identifying a prompt in the fixtures directory."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class GenerationClient:
    """Interface to a text-generation service."""

    def complete(self, prompt: str, max_tokens: int = 1024,
                 temperature: float = 1.0) -> str:
        raise NotImplementedError


class MockGenerationClient(GenerationClient):
    """Offline client replaying fixture files named <prompt_key>.txt."""

    def __init__(self, fixtures_dir: str | None = None):
        self.fixtures_dir = fixtures_dir or os.environ.get(FIXTURES_ENV)
        if not self.fixtures_dir:
            raise ClientError(
                f"no fixtures directory; set {FIXTURES_ENV} or pass one explicitly")

    def complete(self, prompt: str, max_tokens: int = 1024,
                 temperature: float = 1.0) -> str:
        path = os.path.join(self.fixtures_dir, prompt_key(prompt) + ".txt")
        if not os.path.isfile(path):
            raise ClientError(f"no fixture for prompt key {prompt_key(prompt)}")
        with open(path, encoding="utf-8") as f:
            return f.read()


@dataclass
class SkipReport:
    skipped: list = field(default_factory=list)  # (caption id, reason)

    def count(self) -> int:
        return len(self.skipped)


def generate_examples(captions, client: GenerationClient, max_retries: int = 2,
                      backoff_s: float = 0.0, max_workers: int = 1):
    """One query per caption; every parsed pair becomes an example.

    Captions whose completion fails to parse are skipped and reported.
    A client failure that survives all retries aborts with the examples
    generated so far attached to the raised ClientError.
    """

    def fetch(caption):
        prompt = build_prompt(caption)
        last = None
        for attempt in range(max_retries + 1):
            try:
                return client.complete(prompt)
            except ClientError as e:
                last = e
                if attempt < max_retries and backoff_s:
                    time.sleep(backoff_s * (2 ** attempt))
        raise ClientError(f"caption {caption.id!r}: {last}")

    captions = list(captions)
    completions = []
    examples = []
    try:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                completions = list(pool.map(fetch, captions))
        else:
            completions = [fetch(c) for c in captions]
    except ClientError as e:
        e.partial = examples
        raise
    report = SkipReport()
    for caption, completion in zip(captions, completions):
        try:
            pairs = parse_qa_pairs(completion)
        except NoPairsFound:
            report.skipped.append((caption.id, "no Q/A pairs parsed"))
            continue
        for k, (q, a) in enumerate(pairs):
            examples.append(InstructionExample(
                id=f"{caption.id}-{k}", media=caption.media,
                instruction=q, response=a, source=caption.source))
    return examples, report


def mix(sources: dict, n_per_source: int, seed: int) -> list:
    """Sample n examples without replacement from each source, concatenate,
    then shuffle globally; fully determined by the seed."""
    rng = random.Random(seed)
    combined = []
    for name in sorted(sources):
        pool = list(sources[name])
        if len(pool) < n_per_source:
            raise SourceTooSmall(
                f"source {name!r} has {len(pool)} < {n_per_source} examples")
        combined.extend(rng.sample(pool, n_per_source))
    rng.shuffle(combined)
    return combined


def stats(examples) -> dict:
    """Per-source item counts and average instruction/response word lengths
    (whitespace tokens, one decimal)."""
    examples = list(examples)
    if not examples:
        raise EmptyDataset("no examples to summarize")
    acc: dict = {}
    for ex in examples:
        row = acc.setdefault(ex.source, {"items": 0, "ins_words": 0, "res_words": 0})
        row["items"] += 1
        row["ins_words"] += len(ex.instruction.split())
        row["res_words"] += len(ex.response.split())
    return {src: {"items": row["items"],
                  "ins_len": round(row["ins_words"] / row["items"], 1),
                  "res_len": round(row["res_words"] / row["items"], 1)}
            for src, row in sorted(acc.items())}


def format_stats_table(table: dict) -> str:
    lines = [f"{'Dataset':<16}{'Items':>10}{'Ins. Len.':>12}{'Res. Len.':>12}"]
    for src, row in table.items():
        lines.append(f"{src:<16}{row['items']:>10,}{row['ins_len']:>12.1f}"
                     f"{row['res_len']:>12.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# JSONL interchange
# ---------------------------------------------------------------------------

def example_to_line(ex: InstructionExample) -> str:
    return json.dumps(ex.to_dict(), ensure_ascii=False, sort_keys=True)


def write_examples(path: str, examples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(example_to_line(ex) + "\n")


def read_examples(path: str) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e})") from e
            out.append(InstructionExample.from_dict(d))
    return out


def read_captions(path: str) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e})") from e
            for key in ("id", "media", "caption", "source"):
                if key not in d:
                    raise SchemaError(f"{path}:{lineno}: missing key {key!r}")
            if not d["caption"]:
                raise SchemaError(f"{path}:{lineno}: empty caption")
            if not d["media"]:
                raise SchemaError(f"{path}:{lineno}: empty media list")
            out.append(CaptionRecord(id=str(d["id"]),
                                     media=tuple(_check_media(d["media"], d["id"])),
                                     caption=d["caption"], source=str(d["source"])))
    return out
