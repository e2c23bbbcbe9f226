"""Character phonology: rhyme groups and level/oblique tone classes.

The shipped default table is a coarse modern-reading approximation: rhyme
groups follow the fourteen modern rhyme classes and the tone class maps
first/second tones to 平 (level) and third/fourth to 仄 (oblique).  It is
deliberately pluggable; drop in a 平水韵 table for historically faithful
checking.  Characters missing from a table are reported as unknown, never
as failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import GutiError

PING = "ping"
ZE = "ze"

TABLE_FORMAT_VERSION = 1


class PhonologyError(GutiError):
    pass


@dataclass
class PhonologyTable:
    """char -> rhyme group id, char -> tone class (ping/ze)."""

    rhyme_group: dict[str, str] = field(default_factory=dict)
    tone_class: dict[str, str] = field(default_factory=dict)
    label: str = ""

    def group_of(self, ch: str) -> str | None:
        return self.rhyme_group.get(ch)

    def tone_of(self, ch: str) -> str | None:
        return self.tone_class.get(ch)

    def __len__(self) -> int:
        return len(self.rhyme_group)


def parse_table(text: str, source: str = "<table>") -> PhonologyTable:
    """One record per line: ``character<TAB>rhyme-group<TAB>tone-class``."""
    table = PhonologyTable(label=source)
    seen_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not seen_header:
            if line != f"guti-phonology v{TABLE_FORMAT_VERSION}":
                raise PhonologyError(f"{source}:{lineno}: missing or bad header")
            seen_header = True
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise PhonologyError(f"{source}:{lineno}: expected 3 tab-separated "
                                 f"fields, got {len(fields)}")
        ch, group, tone = (f.strip() for f in fields)
        if len(ch) != 1:
            raise PhonologyError(f"{source}:{lineno}: key must be one character")
        if tone not in (PING, ZE):
            raise PhonologyError(f"{source}:{lineno}: tone must be ping or ze")
        table.rhyme_group[ch] = group
        table.tone_class[ch] = tone
    if not seen_header:
        raise PhonologyError(f"{source}: empty table")
    return table


def load_table(path: str | Path) -> PhonologyTable:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise PhonologyError(f"cannot read phonology table {p}: {exc}") from exc
    return parse_table(text, source=str(p))


_default_table: PhonologyTable | None = None


def default_table() -> PhonologyTable:
    """The approximate modern-reading table shipped as package data."""
    global _default_table
    if _default_table is None:
        text = resources.files("guti.data").joinpath("phonology.tsv").read_text("utf-8")
        _default_table = parse_table(text, source="builtin-modern-approx")
    return _default_table
