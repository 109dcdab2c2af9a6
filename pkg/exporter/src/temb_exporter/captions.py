"""Caption list ingestion: one record per line, "id<TAB>caption"."""

from __future__ import annotations

from dataclasses import dataclass


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionList:
    entries: tuple[tuple[int, str], ...]

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [cid for cid, _ in self.entries]


def parse_captions(text: str, source: str = "<captions>") -> CaptionList:
    entries: list[tuple[int, str]] = []
    seen: set[int] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CaptionError(f"{source}:{lineno}: expected 'id<TAB>caption', got {line!r}")
        raw_id, _, caption = line.partition("\t")
        try:
            cid = int(raw_id)
        except ValueError:
            raise CaptionError(f"{source}:{lineno}: caption id {raw_id!r} is not an integer") from None
        if cid < 0:
            raise CaptionError(f"{source}:{lineno}: caption id must be unsigned, got {cid}")
        if cid in seen:
            raise CaptionError(f"{source}:{lineno}: duplicate caption id {cid}")
        if not caption.strip():
            raise CaptionError(f"{source}:{lineno}: empty caption text for id {cid}")
        seen.add(cid)
        entries.append((cid, caption.strip()))
    if not entries:
        raise CaptionError(f"{source}: no captions found")
    return CaptionList(entries=tuple(entries))


def load_captions(path) -> CaptionList:
    with open(path, "r", encoding="utf-8") as f:
        return parse_captions(f.read(), source=str(path))
