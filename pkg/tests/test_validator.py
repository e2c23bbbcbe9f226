import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guti.corpus import Line, Poem, parse_body
from guti.errors import UnknownFormError
from guti.phonology import parse_table
from guti.validator import (
    check_acrostic,
    check_pairing,
    check_rhyme,
    check_structure,
    check_tone,
    validate,
)

WUJUE_QIUSI = "暮燕翻惊户，飞鸿却唤人。西风卷梧叶，触落一庭秋。"


def poem(form, theme, body):
    return Poem(form_id=form, theme=theme, body=parse_body(body))


def by_source(fixture_poems, source_id):
    (match,) = [p for p in fixture_poems if p.source_id == source_id]
    return match


class TestStructure:
    def test_wujue_passes(self, catalog):
        spec = catalog.resolve("五绝")
        results = check_structure(poem("五绝", "秋思", WUJUE_QIUSI), spec)
        assert all(r.passed for r in results if r.level == "hard")

    def test_deleted_character_fails_with_position(self, catalog):
        spec = catalog.resolve("五绝")
        damaged = poem("五绝", "秋思", WUJUE_QIUSI.replace("梧", "", 1))
        results = {r.rule: r for r in check_structure(damaged, spec)}
        bad = results["structure.line_lengths"]
        assert bad.passed is False
        assert (3, None) in bad.positions

    def test_wrong_line_count_fails(self, catalog):
        spec = catalog.resolve("五绝")
        five_lines = poem("五绝", "x", WUJUE_QIUSI + "床前明月光。")
        results = {r.rule: r for r in check_structure(five_lines, spec)}
        assert results["structure.line_count"].passed is False

    def test_wrong_punctuation_fails(self, catalog):
        spec = catalog.resolve("五绝")
        swapped = poem("五绝", "x",
                       "暮燕翻惊户。飞鸿却唤人，西风卷梧叶，触落一庭秋。")
        results = {r.rule: r for r in check_structure(swapped, spec)}
        assert results["structure.punctuation"].passed is False

    def test_gushi_checks_even_uniform_lines_only(self, catalog):
        spec = catalog.resolve("五言古诗")
        ok = poem("五言古诗", "x", "床前明月光，疑是地上霜。举头望明月，低头思故乡。"
                                   "床前明月光，疑是地上霜。")
        results = {r.rule: r for r in check_structure(ok, spec)}
        assert results["structure.line_count"].passed
        assert results["structure.line_lengths"].passed
        assert results["structure.punctuation"].passed is None  # not regulated
        odd = poem("五言古诗", "x", "床前明月光，疑是地上霜。举头望明月。")
        results = {r.rule: r for r in check_structure(odd, spec)}
        assert results["structure.line_count"].passed is False

    def test_ci_group_alternatives(self, catalog, fixture_poems):
        spec = catalog.resolve("水调歌头")
        good = by_source(fixture_poems, "t5-shuidiaogetou")
        assert all(r.passed for r in check_structure(good, spec)
                   if r.level == "hard")


class TestPairing:
    def test_couplet_passes(self, catalog):
        spec = catalog.resolve("对联")
        p = poem("对联", "海上飞燕飞上海", "城外环山环外城")
        results = check_pairing(p, spec)
        assert all(r.passed for r in results)

    def test_identical_lines_fail_everywhere(self, catalog):
        spec = catalog.resolve("对联")
        p = poem("对联", "海上飞燕飞上海", "海上飞燕飞上海")
        results = {r.rule: r for r in check_pairing(p, spec)}
        repeat = results["pairing.position_repeat"]
        assert repeat.passed is False
        assert len(repeat.positions) == 7

    def test_function_characters_exempt_from_repeats(self, catalog):
        # 未 repeats at the same slot; as a function character it is allowed
        spec = catalog.resolve("对联")
        p = poem("对联", "风弦未拨心先乱", "诗卷未题笔已枯")
        results = {r.rule: r for r in check_pairing(p, spec)}
        assert results["pairing.position_repeat"].passed

    def test_length_mismatch_fails(self, catalog):
        spec = catalog.resolve("对联")
        p = poem("对联", "海上飞燕飞上海", "城外环山外城")
        results = {r.rule: r for r in check_pairing(p, spec)}
        assert results["pairing.length"].passed is False

    def test_multi_clause_couplet_checks_internal_punctuation(self, catalog):
        spec = catalog.resolve("对联")
        good = poem("对联", "水墨丹青，烟雨江南春纵笔", "花红柳绿，桃源粤地燕裁云")
        assert all(r.passed for r in check_pairing(good, spec))
        assert all(r.passed for r in check_structure(good, spec))
        # shifting the comma breaks the mirrored segment structure
        shifted = poem("对联", "水墨丹青，烟雨江南春纵笔", "花红柳，绿桃源粤地燕裁云")
        results = {r.rule: r for r in check_structure(shifted, spec)}
        assert results["structure.line_lengths"].passed is False

    def test_qilu_pairs_lines_34_and_56(self, catalog, fixture_poems):
        qilu = by_source(fixture_poems, "t4-七律")
        spec = catalog.resolve("七律")
        results = check_pairing(qilu, spec)
        assert all(r.passed for r in results)
        assert len(results) == 6  # three rules per slot pair

    def test_paired_repeat_in_regulated_poem_fails(self, catalog, fixture_poems):
        qilu = by_source(fixture_poems, "t4-七律")
        body = list(qilu.body)
        # copy a character of line 3 into the same slot of line 4
        l4 = body[3].characters
        body[3] = Line(body[2].characters[0] + l4[1:], body[3].terminal_punct)
        damaged = Poem("七律", qilu.theme, tuple(body))
        repeats = [r for r in check_pairing(damaged, catalog.resolve("七律"))
                   if r.rule == "pairing.position_repeat"]
        assert any(r.passed is False for r in repeats)
        positions = [p for r in repeats for p in r.positions]
        assert (4, 1) in positions


TEST_TABLE = parse_table(
    "guti-phonology v1\n"
    "光\t唐\tping\n霜\t唐\tping\n乡\t唐\tping\n"
    "人\t文\tping\n秋\t尤\tping\n"
    "平\t庚\tping\n明\t庚\tping\n仄\t波\tze\n月\t皆\tze\n",
    source="test",
)


class TestRhyme:
    def test_identical_finals_pass_without_table(self, catalog):
        spec = catalog.resolve("五绝")
        p = poem("五绝", "x", "床前明月光，疑是地上光。举头望明月，低头思故光。")
        (result,) = check_rhyme(p, spec, None)
        assert result.passed

    def test_same_group_passes(self, catalog):
        spec = catalog.resolve("五绝")
        p = poem("五绝", "x", "床前明月光，疑是地上霜。举头望明月，低头思故乡。")
        (result,) = check_rhyme(p, spec, TEST_TABLE)
        assert result.passed
        assert "唐" in result.message

    def test_distinct_groups_fail_with_both_reported(self, catalog):
        spec = catalog.resolve("五绝")
        p = poem("五绝", "x", "暮燕翻惊户，飞鸿却唤人。西风卷梧叶，触落一庭秋。")
        (result,) = check_rhyme(p, spec, TEST_TABLE)
        assert result.passed is False
        assert "文" in result.message and "尤" in result.message

    def test_unknown_characters_are_advisory(self, catalog):
        spec = catalog.resolve("五绝")
        p = poem("五绝", "x", "床前明月举，疑是地上望。举头望明月，低头思故头。")
        (result,) = check_rhyme(p, spec, TEST_TABLE)
        assert result.passed is None


class TestTone:
    def make_spec(self, catalog, patterns):
        import dataclasses
        return dataclasses.replace(catalog.resolve("五绝"), tone_patterns=patterns)

    def test_all_any_template_passes(self, catalog):
        spec = self.make_spec(catalog, (("中中中中中",) * 4,))
        p = poem("五绝", "x", WUJUE_QIUSI)
        (result,) = check_tone(p, spec, TEST_TABLE)
        assert result.passed is None  # nothing compared: every slot is open

    def test_fixed_slot_mismatch_reports_position(self, catalog):
        spec = self.make_spec(catalog, (("中中中中仄", "中中中中仄",
                                         "中中中中仄", "中中中中仄"),))
        p = poem("五绝", "x", "床前明月光，疑是地上霜。举头望明月，低头思故乡。")
        (result,) = check_tone(p, spec, TEST_TABLE)
        assert result.passed is False
        assert (1, 5) in result.positions    # 光 is level, template wants oblique

    def test_matching_template_passes(self, catalog):
        spec = self.make_spec(catalog, (("中中中中平", "中中中中平",
                                         "中中中中仄", "中中中中平"),))
        p = poem("五绝", "x", "床前明月光，疑是地上霜。举头望明月，低头思故乡。")
        (result,) = check_tone(p, spec, TEST_TABLE)
        assert result.passed is True

    def test_unknown_characters_everywhere_is_advisory(self, catalog):
        spec = self.make_spec(catalog, (("平平平平平",) * 4,))
        p = poem("五绝", "x", "叠叠叠叠叠，叠叠叠叠叠。叠叠叠叠叠，叠叠叠叠叠。")
        (result,) = check_tone(p, spec, TEST_TABLE)
        assert result.passed is None


class TestAcrostic:
    def test_fixture_acrostic_passes(self, catalog, fixture_poems):
        p = by_source(fixture_poems, "t6-acrostic")
        result = check_acrostic(p, "一路平安", catalog.resolve("七言律诗").acrostic_slots)
        assert result.passed

    def test_empty_target_empty_lines(self):
        assert check_acrostic([], "").passed

    def test_target_longer_than_lines_fails(self):
        assert check_acrostic(["床前明月光"], "床疑").passed is False

    def test_mismatch_reports_line(self, catalog):
        p = poem("五绝", "x", "床前明月光，疑是地上霜。举头望明月，低头思故乡。")
        result = check_acrostic(p, "床疑月低")
        assert result.passed is False
        assert (3, 1) in result.positions


class TestValidate:
    def test_shuidiaogetou_fixture(self, catalog, table, fixture_poems):
        p = by_source(fixture_poems, "t5-shuidiaogetou")
        report = validate(p, catalog, table)
        assert report.well_formed

    def test_five_line_wujue_not_well_formed(self, catalog, table):
        p = poem("五绝", "x", WUJUE_QIUSI + "床前明月光。")
        assert not validate(p, catalog, table).well_formed

    def test_unknown_form_raises(self, catalog):
        p = poem("不存在", "x", WUJUE_QIUSI)
        with pytest.raises(UnknownFormError):
            validate(p, catalog)

    def test_acrostic_form_checks_theme_against_initials(self, catalog, table,
                                                         fixture_poems):
        p = by_source(fixture_poems, "a-华为雄起")
        report = validate(p, catalog, table)
        assert report.well_formed
        assert any(r.rule == "acrostic.initials" and r.passed
                   for r in report.results)

    def test_advisory_failure_never_flips_well_formed(self, catalog, fixture_poems):
        # 秋思 wujue: finals 人/秋 do not rhyme, yet the poem stays well-formed
        p = by_source(fixture_poems, "t4-五绝")
        report = validate(p, catalog, TEST_TABLE)
        rhyme = [r for r in report.results if r.rule == "rhyme.group"]
        assert rhyme and rhyme[0].passed is False
        assert report.well_formed

    def test_strict_phonology_promotes_rhyme_to_hard(self, catalog, fixture_poems):
        p = by_source(fixture_poems, "t4-五绝")
        report = validate(p, catalog, TEST_TABLE, strict_phonology=True)
        assert not report.well_formed

    def test_pure_function_same_report(self, catalog, table, fixture_poems):
        p = by_source(fixture_poems, "t4-七律")
        assert validate(p, catalog, table) == validate(p, catalog, table)

    def test_every_fixture_poem_well_formed(self, catalog, table, fixture_poems):
        for p in fixture_poems:
            report = validate(p, catalog, table)
            assert report.well_formed, (p.source_id, report.failures())


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_single_character_edit_breaks_a_regulated_poem(data, catalog,
                                                       fixture_poems):
    """Any single insertion or deletion must flip some hard rule."""
    jintishi = [p for p in fixture_poems
                if catalog.resolve(p.form_id).form_class == "jintishi"]
    target = data.draw(st.sampled_from(jintishi))
    line_idx = data.draw(st.integers(0, len(target.body) - 1))
    line = target.body[line_idx]
    body = list(target.body)
    if data.draw(st.booleans()) and len(line.characters) > 1:
        pos = data.draw(st.integers(0, len(line.characters) - 1))
        chars = line.characters[:pos] + line.characters[pos + 1:]
    else:
        pos = data.draw(st.integers(0, len(line.characters)))
        chars = line.characters[:pos] + "田" + line.characters[pos:]
    body[line_idx] = Line(chars, line.terminal_punct)
    damaged = Poem(target.form_id, target.theme, tuple(body))
    assert not validate(damaged, catalog).well_formed
