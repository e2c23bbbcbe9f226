"""Mechanized form conformance checking.

Hard rules decide well-formedness: line/group structure, per-line
character counts, punctuation slots, and pairing (couplets always; the
3rd/4th and 5th/6th lines of eight-line regulated poems).  Rhyme and tone
checks run against a pluggable phonology table and are advisory by
default, because tone-table choice is contested; a flag promotes them to
hard rules.  Every check is a pure function of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Line, Poem, parse_body
from .errors import CorpusError
from .forms import COMMA, PERIOD, TONE_ANY, TONE_PING, FormCatalog, FormSpec
from .phonology import PING, PhonologyTable

HARD = "hard"
ADVISORY = "advisory"

# Classical function characters exempt from the same-position repetition
# rule in pairs (repeating a content character is a fault; repeating a
# particle or negation in the same slot is conventional).
PAIR_REPEAT_EXEMPT = frozenset("之乎者也而何其且若所以于与兮焉哉矣诸夫盖然则乃不无非未莫勿毋弗")

Position = tuple[int, int | None]   # (1-indexed line, 1-indexed char or None)


@dataclass(frozen=True)
class RuleResult:
    rule: str
    level: str                      # hard | advisory
    passed: bool | None             # None = unknown / not applicable
    positions: tuple[Position, ...] = ()
    message: str = ""

    def to_dict(self) -> dict:
        return {"rule": self.rule, "level": self.level, "passed": self.passed,
                "positions": [list(p) for p in self.positions],
                "message": self.message}


@dataclass
class ValidationReport:
    form_id: str
    results: list[RuleResult] = field(default_factory=list)

    @property
    def well_formed(self) -> bool:
        return all(r.passed is not False for r in self.results if r.level == HARD)

    def failures(self) -> list[RuleResult]:
        return [r for r in self.results if r.passed is False]

    def to_dict(self) -> dict:
        return {"form": self.form_id, "well_formed": self.well_formed,
                "rules": [r.to_dict() for r in self.results]}


def _expand_templates(spec: FormSpec) -> list[tuple[tuple[int, str], ...]]:
    """All full (length, punct) line sequences a groups-template allows."""
    combos = []
    for picks in itertools.product(*spec.line_template.groups):
        seq: list[tuple[int, str]] = []
        for alt in picks:
            for j, seg_len in enumerate(alt):
                punct = PERIOD if j == len(alt) - 1 else COMMA
                seq.append((seg_len, punct))
        combos.append(tuple(seq))
    return combos


def _best_template(templates, lines: Sequence[Line]):
    """Template variant agreeing with the poem in the most positions."""
    def score(tpl):
        s = -abs(len(tpl) - len(lines)) * 2
        for (want_len, want_punct), line in zip(tpl, lines):
            s += 2 * (len(line) == want_len) + (line.terminal_punct == want_punct)
        return s
    return max(templates, key=score)


def check_structure(poem: Poem, spec: FormSpec) -> list[RuleResult]:
    """Line counts, per-line character counts, punctuation slots."""
    lines = poem.body
    kind = spec.line_template.kind
    results: list[RuleResult] = []

    if kind == "uniform":
        n = spec.line_template.uniform_len
        ok_count = len(lines) >= 2 and len(lines) % 2 == 0
        results.append(RuleResult(
            "structure.line_count", HARD, ok_count,
            message=(f"{len(lines)} lines" if ok_count else
                     f"old-style poems need an even line count >= 2, got {len(lines)}")))
        bad = tuple((i + 1, None) for i, ln in enumerate(lines) if len(ln) != n)
        results.append(RuleResult(
            "structure.line_lengths", HARD, not bad, bad,
            message="" if not bad else f"every line must have {n} characters"))
        results.append(RuleResult(
            "structure.punctuation", ADVISORY, None,
            message="punctuation is not regulated for old-style poetry"))
        return results

    if kind == "mirror":
        try:
            theme_lines = parse_body(poem.theme)
        except CorpusError as exc:
            return [RuleResult("structure.theme", HARD, False,
                               message=f"couplet first line unusable: {exc}")]
        tpl = tuple((len(ln), ln.terminal_punct or "") for ln in theme_lines)
        got = tuple((len(ln), ln.terminal_punct or "") for ln in lines)
        ok_count = len(tpl) == len(got)
        results.append(RuleResult(
            "structure.line_count", HARD, ok_count,
            message="" if ok_count else
            f"second line has {len(got)} segments, first line has {len(tpl)}"))
        bad_len, bad_punct = [], []
        for i, ((wl, wp), (gl, gp)) in enumerate(zip(tpl, got)):
            if wl != gl:
                bad_len.append((i + 1, None))
            final = i == min(len(tpl), len(got)) - 1
            if not final and wp != gp:
                bad_punct.append((i + 1, None))
        results.append(RuleResult(
            "structure.line_lengths", HARD, not bad_len, tuple(bad_len),
            message="" if not bad_len else "segment lengths must mirror the first line"))
        results.append(RuleResult(
            "structure.punctuation", HARD, not bad_punct, tuple(bad_punct),
            message="" if not bad_punct else
            "internal punctuation must mirror the first line"))
        return results

    templates = _expand_templates(spec)
    feasible_counts = sorted({len(t) for t in templates})
    ok_count = len(lines) in feasible_counts
    results.append(RuleResult(
        "structure.line_count", HARD, ok_count,
        message="" if ok_count else
        f"expected {' or '.join(map(str, feasible_counts))} lines, got {len(lines)}"))
    if not ok_count:
        # the hard failure above already decides the verdict; per-line
        # comparisons against a template of another size would mislead
        results.append(RuleResult("structure.line_lengths", HARD, None,
                                  message="not evaluated: line count differs"))
        results.append(RuleResult("structure.punctuation", HARD, None,
                                  message="not evaluated: line count differs"))
        return results
    tpl = _best_template(templates, lines)
    bad_len = tuple((i + 1, None) for i, (ln, (want, _)) in
                    enumerate(zip(lines, tpl)) if len(ln) != want)
    results.append(RuleResult(
        "structure.line_lengths", HARD, not bad_len, bad_len,
        message="" if not bad_len else "line lengths: " + ", ".join(
            f"line {i}: {len(lines[i - 1])} chars (expected {tpl[i - 1][0]})"
            for i, _ in bad_len)))
    bad_punct = tuple((i + 1, None) for i, (ln, (_, want)) in
                      enumerate(zip(lines, tpl)) if ln.terminal_punct != want)
    results.append(RuleResult(
        "structure.punctuation", HARD, not bad_punct, bad_punct,
        message="" if not bad_punct else
        "terminal punctuation deviates from the form template"))
    return results


def _pair_lines(first: str, second: str, first_punct: str | None,
                second_punct: str | None, line_a: int, line_b: int) -> list[RuleResult]:
    results = []
    ok_len = len(first) == len(second)
    results.append(RuleResult(
        "pairing.length", HARD, ok_len,
        ((line_a, None), (line_b, None)) if not ok_len else (),
        message="" if ok_len else
        f"paired lines differ in length: {len(first)} vs {len(second)}"))
    repeats = tuple((line_b, i + 1) for i, (a, b) in enumerate(zip(first, second))
                    if a == b and a not in PAIR_REPEAT_EXEMPT)
    results.append(RuleResult(
        "pairing.position_repeat", HARD, not repeats, repeats,
        message="" if not repeats else "character repeated at the same position: "
        + ", ".join(f"{second[p - 1]!r}@{p}" for _, p in repeats)))
    if first_punct and second_punct:
        ok_punct = (first_punct, second_punct) == (COMMA, PERIOD)
    else:
        ok_punct = first_punct is None and second_punct is None
    results.append(RuleResult(
        "pairing.punctuation", HARD, ok_punct,
        () if ok_punct else ((line_a, None), (line_b, None)),
        message="" if ok_punct else
        "paired lines should end with complementary punctuation (，/。)"))
    return results


def check_pairing(poem: Poem, spec: FormSpec) -> list[RuleResult]:
    """Structural pairing: equal lengths, no same-position character
    repeats (function characters exempt), complementary punctuation."""
    results: list[RuleResult] = []
    if spec.line_template.kind == "mirror":
        try:
            theme_lines = parse_body(poem.theme)
        except CorpusError as exc:
            return [RuleResult("pairing.length", HARD, False,
                               message=f"couplet first line unusable: {exc}")]
        first = "".join(ln.characters for ln in theme_lines)
        second = "".join(ln.characters for ln in poem.body)
        return _pair_lines(first, second,
                           theme_lines[-1].terminal_punct,
                           poem.body[-1].terminal_punct, 0, 1)
    for a, b in spec.pairing_slots:
        if a < 1 or b < 1 or a > len(poem.body) or b > len(poem.body):
            results.append(RuleResult(
                "pairing.length", HARD, False, ((a, None), (b, None)),
                message=f"pair slot ({a},{b}) outside the poem"))
            continue
        la, lb = poem.body[a - 1], poem.body[b - 1]
        results.extend(_pair_lines(la.characters, lb.characters,
                                   la.terminal_punct, lb.terminal_punct, a, b))
    return results


def check_rhyme(poem: Poem, spec: FormSpec, table: PhonologyTable | None,
                level: str = ADVISORY) -> list[RuleResult]:
    """Final characters of the rhyme-slot lines must share a rhyme group."""
    slots = [s for s in spec.rhyme_slots if 1 <= s <= len(poem.body)]
    if len(slots) < 2:
        return [RuleResult("rhyme.group", level, None,
                           message="fewer than two rhyme slots available")]
    finals = [(s, poem.body[s - 1].characters[-1]) for s in slots]
    if len({ch for _, ch in finals}) == 1:
        return [RuleResult("rhyme.group", level, True,
                           message=f"identical final character {finals[0][1]!r}")]
    if table is None:
        return [RuleResult("rhyme.group", level, None,
                           message="no phonology table loaded")]
    known = [(s, ch, table.group_of(ch)) for s, ch in finals]
    unknown = [(s, ch) for s, ch, g in known if g is None]
    groups = {g for _, _, g in known if g is not None}
    if len([g for _, _, g in known if g is not None]) < 2:
        return [RuleResult(
            "rhyme.group", level, None,
            tuple((s, None) for s, _ in unknown),
            message="rhyme characters missing from the table: "
            + " ".join(ch for _, ch in unknown))]
    if len(groups) == 1:
        msg = f"shared rhyme group {groups.pop()!r}"
        if unknown:
            msg += "; unknown: " + " ".join(ch for _, ch in unknown)
        return [RuleResult("rhyme.group", level, True, message=msg)]
    detail = ", ".join(f"line {s}: {ch!r} -> {g}" for s, ch, g in known
                       if g is not None)
    return [RuleResult(
        "rhyme.group", level, False,
        tuple((s, len(poem.body[s - 1].characters)) for s, _, g in known
              if g is not None),
        message=f"final characters fall in different rhyme groups: {detail}")]


def check_tone(poem: Poem, spec: FormSpec, table: PhonologyTable | None,
               level: str = ADVISORY) -> list[RuleResult]:
    """Per-position level/oblique comparison against the tone template."""
    if not spec.tone_patterns:
        return [RuleResult("tone.pattern", level, None,
                           message="form carries no tone template")]
    if table is None:
        return [RuleResult("tone.pattern", level, None,
                           message="no phonology table loaded")]
    variants = [v for v in spec.tone_patterns if len(v) == len(poem.body)]
    if not variants:
        return [RuleResult("tone.pattern", level, None,
                           message="line count does not fit any tone template")]
    best = None
    for variant in variants:
        mismatches: list[Position] = []
        compared = 0
        for li, (pattern, line) in enumerate(zip(variant, poem.body), start=1):
            for ci, (want, ch) in enumerate(zip(pattern, line.characters), start=1):
                if want == TONE_ANY:
                    continue
                tone = table.tone_of(ch)
                if tone is None:
                    continue
                compared += 1
                good = (tone == PING) == (want == TONE_PING)
                if not good:
                    mismatches.append((li, ci))
        cand = (len(mismatches), -compared, tuple(mismatches), compared)
        if best is None or cand < best:
            best = cand
    n_bad, _, positions, compared = best
    if compared == 0:
        return [RuleResult("tone.pattern", level, None,
                           message="no template character found in the table")]
    if n_bad == 0:
        return [RuleResult("tone.pattern", level, True,
                           message=f"{compared} fixed slots agree")]
    return [RuleResult(
        "tone.pattern", level, False, positions,
        message=f"{n_bad} tone slots deviate from the closest template variant")]


def check_acrostic(poem: Poem | Sequence[str], target: str,
                   slots: tuple[int, ...] = ()) -> RuleResult:
    """Initial characters of the slot lines must spell the target.

    Empty ``slots`` means every line carries one target character.
    """
    if isinstance(poem, Poem):
        lines = [line.characters for line in poem.body]
    else:
        lines = [s for s in poem]
    if not slots:
        slots = tuple(range(1, len(lines) + 1))
    if any(not 1 <= s <= len(lines) for s in slots):
        return RuleResult(
            "acrostic.initials", HARD, False,
            message=f"acrostic slots {slots} do not fit a {len(lines)}-line poem")
    initials = [lines[s - 1][0] for s in slots]
    if len(initials) != len(target):
        return RuleResult(
            "acrostic.initials", HARD, False,
            message=f"target has {len(target)} characters but the poem offers "
                    f"{len(initials)} acrostic lines")
    bad = tuple((slots[i], 1) for i, (got, want) in enumerate(zip(initials, target))
                if got != want)
    return RuleResult(
        "acrostic.initials", HARD, not bad, bad,
        message="" if not bad else "line-initial characters deviate: "
        + ", ".join(f"line {ln}: {lines[ln - 1][0]!r} != {target[slots.index(ln)]!r}"
                    for ln, _ in bad))


def validate(poem: Poem, catalog: FormCatalog,
             table: PhonologyTable | None = None,
             strict_phonology: bool = False,
             acrostic_target: str | None = None) -> ValidationReport:
    """Run every applicable check; well_formed is the AND of hard rules."""
    spec = catalog.resolve(poem.form_id)
    phon_level = HARD if strict_phonology else ADVISORY
    report = ValidationReport(form_id=poem.form_id)
    report.results.extend(check_structure(poem, spec))
    if spec.line_template.kind == "mirror" or spec.pairing_slots:
        report.results.extend(check_pairing(poem, spec))
    if spec.rhyme_slots:
        report.results.extend(check_rhyme(poem, spec, table, phon_level))
    if spec.tone_patterns:
        report.results.extend(check_tone(poem, spec, table, phon_level))
    target = acrostic_target if acrostic_target is not None else (
        poem.theme if spec.acrostic else None)
    if target:
        report.results.append(check_acrostic(poem, target, spec.acrostic_slots))
    return report
