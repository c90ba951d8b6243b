"""Byte-level reversible tokenizer.

Ids 0..3 are the specials PAD/BOS/EOS/SEP; ids 4..259 map one-to-one onto
byte values, so decode(encode(s)) == s for any UTF-8 string and there is
never an OOV token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidId, InvalidUtf8

PAD = 0
BOS = 1
EOS = 2
SEP = 3

_BYTE_OFFSET = 4
_N_BYTES = 256


@dataclass(frozen=True)
class Vocab:
    size: int = _BYTE_OFFSET + _N_BYTES  # 260
    specials: dict = field(default_factory=lambda: {
        "PAD": PAD, "BOS": BOS, "EOS": EOS, "SEP": SEP})

    def __post_init__(self):
        if self.size < _BYTE_OFFSET + _N_BYTES:
            raise ValueError("vocab must cover all byte values plus specials")

    def encode(self, text: str) -> list[int]:
        """One id per UTF-8 byte; no BOS/EOS framing (caller's job)."""
        return [b + _BYTE_OFFSET for b in text.encode("utf-8")]

    def decode(self, ids, errors: str = "strict") -> str:
        """Map byte ids back to text, dropping special ids.

        ``errors`` follows :meth:`bytes.decode`; the default raises
        :class:`InvalidUtf8` on malformed byte sequences, while
        ``errors="replace"`` substitutes U+FFFD instead.
        """
        out = bytearray()
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS, SEP):
                continue
            if not _BYTE_OFFSET <= i < _BYTE_OFFSET + _N_BYTES:
                raise InvalidId(f"id {i} outside byte range for vocab size {self.size}")
            out.append(i - _BYTE_OFFSET)
        try:
            return out.decode("utf-8", errors=errors)
        except UnicodeDecodeError as e:
            raise InvalidUtf8(str(e)) from e

    def to_dict(self) -> dict:
        return {"size": self.size, "specials": dict(self.specials)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(size=int(d["size"]), specials={k: int(v) for k, v in d["specials"].items()})
