"""Differential validation: trace comparison, ordering, chain audit,
secret-branch taint, and the protection-specific audits."""

from dataclasses import replace

import pytest

from opaqueir.interp import parse_input, run
from opaqueir.passes import (
    PRESETS,
    ProvenanceMap,
    constprop,
    dce,
    instcombine,
    optimize,
    unsafe_const_fold_opaque,
)
from opaqueir.patterns import prepare
from opaqueir.validate import (
    EventMap,
    PartialState,
    SecretSpec,
    ValidationReport,
    Verdict,
    audit_chain_preservation,
    audit_erasure,
    audit_interleaving,
    check_line,
    check_observation_preserving,
    check_ordering,
    check_secret_branches,
    compare_traces,
    observation_trace,
)


def prog(text):
    program, _ = prepare(text)
    return program


def run_ok(program, inputs=None):
    spec = parse_input(inputs) if inputs else None
    result = run(program, spec)
    assert result.trapped is None, result.trapped
    return result


def validate(src, preset, inputs, conditional_on=None):
    program = prog(src)
    res = optimize(program, preset=preset)
    specs = [parse_input(t) if t else None for t in inputs]
    return check_observation_preserving(
        program, res.program, res.provenance, specs, conditional_on=conditional_on
    )


ONE_INPUT = "desc inp in ordered\n5\n"
TWO_INPUTS = "desc inp in ordered\n5\n9\n"


CHAINED = """
function main() {
  a = io(inp)
  b = io(inp)
  t1 = observe_decoupled(a)
  t2 = observe_decoupled(b, t1)
  u = observe_tailio(t2)
  io(out, a)
  return()
}
"""

MONOLITHIC = """
function main() {
  x = io(inp)
  y = x ^ 21
  t = observe_monolithic(x, y)
  io(out, y)
  return()
}
"""


# --------------------------------------------------------------------------
# Trace comparison
# --------------------------------------------------------------------------


def test_identical_traces_compare_clean():
    for src, inputs in [(CHAINED, TWO_INPUTS), (MONOLITHIC, ONE_INPUT)]:
        trace = observation_trace(run_ok(prog(src), inputs))
        assert trace  # the fixture had better observe something
        delta = compare_traces(trace, trace)
        assert delta.forward.passed and delta.backward.passed
        assert len(delta.pairs) == len(trace)


def test_missing_observation_fails_forward_with_location():
    trace = observation_trace(run_ok(prog(MONOLITHIC), ONE_INPUT))
    delta = compare_traces(trace, ())
    assert not delta.forward.passed
    assert delta.backward.passed
    sid = trace[0].source_id
    assert f"{sid[0]}:{sid[1]}#0 missing" in delta.missing


def test_value_mismatch_fails_forward():
    trace = observation_trace(run_ok(prog(MONOLITHIC), ONE_INPUT))
    twisted = tuple(
        PartialState(s.source_id, s.names, (999,) * len(s.values), s.seq, s.record)
        for s in trace
    )
    delta = compare_traces(trace, twisted)
    assert not delta.forward.passed
    assert delta.backward.passed  # positionally matched, so nothing is extra
    assert "expected" in delta.mismatched[0] and "got" in delta.mismatched[0]


def test_unmatched_extra_record_fails_backward():
    trace = observation_trace(run_ok(prog(MONOLITHIC), ONE_INPUT))
    extra = PartialState((99, 9), ("z",), (1,), 50, (50, 0))
    delta = compare_traces(trace, trace + (extra,))
    assert delta.forward.passed
    assert not delta.backward.passed
    assert "99:9" in delta.invented[0]


def test_extra_state_excused_when_a_sibling_tag_matched():
    # A combined record carries the executed arm's tag plus a sibling the
    # reference never produced; the exact sibling match vouches for it.
    trace = observation_trace(run_ok(prog(MONOLITHIC), ONE_INPUT))
    st = trace[0]
    alternate = PartialState((77, 7), ("q",), (4,), st.seq, st.record)
    delta = compare_traces(trace, trace + (alternate,))
    assert delta.backward.passed


def test_repeated_source_ids_match_by_instance():
    src = """
function main() {
  br head(0)
head(i):
  c = i < 3
  br c, body, done
body:
  t = observe_decoupled(i)
  u = observe_tailio(t)
  i2 = i + 1
  br head(i2)
done:
  return()
}
"""
    trace = observation_trace(run_ok(prog(src)))
    assert [s.values for s in trace] == [(0,), (1,), (2,)]
    assert len({s.source_id for s in trace}) == 1
    delta = compare_traces(trace, trace[:-1])
    assert not delta.forward.passed
    assert delta.missing[0].endswith("#2 missing")


# --------------------------------------------------------------------------
# The preservation report, end to end
# --------------------------------------------------------------------------


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_fixture_programs_validate_under_every_preset(preset):
    for src, inputs in [(CHAINED, TWO_INPUTS), (MONOLITHIC, ONE_INPUT)]:
        report = validate(src, preset, [inputs])
        assert report.passed, (preset, report.render())


def test_p0_is_the_identity_baseline():
    for src, inputs in [(CHAINED, TWO_INPUTS), (MONOLITHIC, ONE_INPUT)]:
        report = validate(src, "P0", [inputs])
        assert report.passed
        assert all(v.witnesses == () for _, v in report.checks())


def test_unsafe_fold_fails_integrity_and_ordering():
    src = """
function main() {
  k = io(inp)
  x = opaque { s = snapshot(k); yield(7) }
  io(out, x)
  return()
}
"""
    program = prog(src)
    res = unsafe_const_fold_opaque(program)
    report = check_observation_preserving(
        program, res.program, res.provenance, [parse_input(ONE_INPUT)]
    )
    assert report.io_equality.passed  # the fold kept the values right
    assert not report.value_integrity_fwd.passed
    assert "missing" in report.value_integrity_fwd.witnesses[0]
    assert not report.ordering.passed
    assert not report.passed


def test_merged_observations_expand_and_validate():
    src = """
function main() {
  a = io(inp)
  w1 = opaque { s1 = snapshot(a); yield(unit_value) }
  w2 = opaque { s2 = snapshot(a); yield(unit_value) }
  use(w1)
  use(w2)
  io(out, a)
  return()
}
"""
    program = prog(src)
    res = instcombine(program)
    report = check_observation_preserving(
        program, res.program, res.provenance, [parse_input(ONE_INPUT)]
    )
    assert report.passed, report.render()
    # sanity: the merge really happened, one record carrying both tags
    opt = run_ok(res.program, ONE_INPUT)
    recs = [rec for ev in opt.events for rec in ev.obs]
    assert len(recs) == 1 and len(recs[0].tags) == 2


def test_hoisted_arms_pass_both_ways():
    src = """
function main() {
  c = io(flag)
  br c, left, right
left:
  w1 = opaque { s1 = snapshot(c); yield(unit_value) }
  use(w1)
  br join
right:
  w2 = opaque { s2 = snapshot(c); yield(unit_value) }
  use(w2)
  br join
join:
  io(out, 0)
  return()
}
"""
    program = prog(src)
    res = instcombine(program)
    for value in (0, 1):
        spec = parse_input(f"desc flag in ordered\n{value}\n")
        report = check_observation_preserving(
            program, res.program, res.provenance, [spec]
        )
        # the merged instruction observes under both arms' tags; the one
        # the reference never executed is vouched for by its sibling
        assert report.value_integrity_bwd.passed, report.render()
        assert report.passed, report.render()


def test_unrolled_observation_loop_validates():
    src = """
function main() {
  t0 = token(7)
  br head(0, t0)
head(i, t):
  c = i < 3
  br c, body, done(t)
body:
  w = observe_decoupled(i, t)
  i2 = i + 1
  br head(i2, w)
done(tf):
  u = observe_tailio(tf)
  io(out, 1)
  return()
}
"""
    program = prog(src)
    res = optimize(program, preset="Pz")
    blocks = res.program.function("main").region.blocks
    assert all(
        not (hasattr(i, "cond") and i.cond is not None)
        for b in blocks
        for i in b.instrs
    ), "the loop should be gone"
    report = check_observation_preserving(
        program, res.program, res.provenance, [None]
    )
    assert report.passed, report.render()


def test_trap_mismatch_fails_io_equality():
    ref = prog(
        """
function main() {
  z = io(inp)
  q = 5 / z
  io(out, q)
  return()
}
"""
    )
    opt = prog(
        """
function main() {
  z = io(inp)
  io(out, 5)
  return()
}
"""
    )
    report = check_observation_preserving(
        ref, opt, ProvenanceMap(), [parse_input("desc inp in ordered\n0\n")]
    )
    assert not report.io_equality.passed
    assert "trap" in report.io_equality.witnesses[0]


def test_changed_write_fails_io_equality():
    ref = prog("function main() { a = io(inp)\n io(out, a)\n return() }")
    opt = prog("function main() { a = io(inp)\n b = a + 1\n io(out, b)\n return() }")
    report = check_observation_preserving(
        ref, opt, ProvenanceMap(), [parse_input(ONE_INPUT)]
    )
    assert not report.io_equality.passed
    assert "write out differs" in report.io_equality.witnesses[0]


# --------------------------------------------------------------------------
# Ordering
# --------------------------------------------------------------------------


def test_ordering_flags_a_severed_observe_from():
    # The copy between the read and the observation redirects observe-from
    # to the copy's event, so the read-before-observation pair is lost
    # even though every value and every io record is intact.
    ref = prog(
        """
function main() {
  a = io(inp)
  t = observe_monolithic(a)
  io(out, a)
  return()
}
"""
    )
    opt = prog(
        """
function main() {
  a0 = io(inp); a = a0
  t = observe_monolithic(a)
  io(out, a)
  return()
}
"""
    )
    spec = parse_input(ONE_INPUT)
    verdict = check_ordering(run(ref, spec), run(opt, spec))
    assert not verdict.passed
    assert "not preserved" in verdict.witnesses[0]


def test_ordering_accepts_chained_observations_after_p3():
    program = prog(CHAINED)
    res = optimize(program, preset="P3")
    spec = parse_input(TWO_INPUTS)
    verdict = check_ordering(run(program, spec), run(res.program, spec), res.provenance)
    assert verdict.passed, verdict.witnesses


def test_lost_io_record_always_fails_ordering():
    ref = prog("function main() { a = io(inp)\n io(out, a)\n return() }")
    opt = prog("function main() { a = io(inp)\n return() }")
    spec = parse_input(ONE_INPUT)
    verdict = check_ordering(run(ref, spec), run(opt, spec))
    assert not verdict.passed
    assert "io out #0 lost" in verdict.witnesses


# --------------------------------------------------------------------------
# The conditional form
# --------------------------------------------------------------------------

CONDITIONAL = """
function main() {
  dead = 1 + 2
  a = io(inp)
  t = observe_decoupled(a)
  io(out, a)
  return()
}
"""


def test_conditional_waiver_is_vacuous_when_the_anchor_dies():
    # P1 deletes both the anchor instruction and the unanchored
    # observation; conditioned on the anchor, nothing is owed.
    plain = validate(CONDITIONAL, "P1", [ONE_INPUT])
    assert not plain.value_integrity_fwd.passed

    waived = validate(CONDITIONAL, "P1", [ONE_INPUT], conditional_on=("main", 0, 0))
    assert waived.value_integrity_fwd.passed, waived.render()
    assert waived.passed

    by_name = validate(CONDITIONAL, "P1", [ONE_INPUT], conditional_on="main")
    assert by_name.value_integrity_fwd.passed


def test_conditional_on_a_surviving_anchor_still_fails():
    report = validate(CONDITIONAL, "P1", [ONE_INPUT], conditional_on=("main", 0, 1))
    assert not report.value_integrity_fwd.passed


def test_conditional_on_requires_a_real_function():
    with pytest.raises(KeyError):
        validate(CONDITIONAL, "P1", [ONE_INPUT], conditional_on="nonesuch")


def test_conditional_waiver_never_covers_mismatches():
    ref = prog(
        """
function main() {
  k = 1 + 2
  a = io(inp)
  t = observe_decoupled(a)
  io(out, a)
  return()
}
"""
    )
    opt = prog(
        """
function main() {
  a0 = io(inp)
  a = a0 + 1
  t = observe_decoupled(a)
  io(out, a0)
  return()
}
"""
    )
    report = check_observation_preserving(
        ref, opt, ProvenanceMap(), [parse_input(ONE_INPUT)],
        conditional_on=("main", 0, 0),
    )
    assert not report.value_integrity_fwd.passed
    assert "expected" in report.value_integrity_fwd.witnesses[0]


# --------------------------------------------------------------------------
# Event correspondence
# --------------------------------------------------------------------------


def test_identity_provenance_maps_every_event_to_itself():
    result = run_ok(prog(MONOLITHIC), ONE_INPUT)
    em = EventMap(result.events, result.events, ProvenanceMap.identity(result.program))
    for ev in result.events:
        if ev.iid is not None:
            assert em.counterpart(ev.seq) == ev.seq


def test_event_map_requires_edges():
    result = run_ok(prog(MONOLITHIC), ONE_INPUT)
    em = EventMap(result.events, result.events, ProvenanceMap())
    assert all(em.counterpart(ev.seq) is None for ev in result.events)


# --------------------------------------------------------------------------
# Chain preservation
# --------------------------------------------------------------------------


def test_chain_audit_passes_across_presets():
    program = prog(CHAINED)
    spec = parse_input(TWO_INPUTS)
    ref = run(program, spec)
    for preset in sorted(PRESETS):
        res = optimize(program, preset=preset)
        verdict = audit_chain_preservation(
            ref, run(res.program, spec), res.provenance, inputs=spec
        )
        assert verdict.passed, (preset, verdict.witnesses)


def test_chain_audit_catches_the_severed_chain():
    src = """
function main() {
  k = io(inp)
  x = opaque { s = snapshot(k); yield(7) }
  io(out, x)
  return()
}
"""
    program = prog(src)
    res = unsafe_const_fold_opaque(program)
    spec = parse_input(ONE_INPUT)
    verdict = audit_chain_preservation(
        run(program, spec), run(res.program, spec), res.provenance, inputs=spec
    )
    assert not verdict.passed
    assert any("severed" in w or "lost" in w for w in verdict.witnesses)


def test_constant_valued_links_are_exempt_from_the_audit():
    # All links yield the same value no matter what the region produces,
    # so no opaque chain ever existed here and there is nothing to audit.
    src = """
function main() {
  x = opaque { yield(42) }
  c = x == 42
  br c, a, b
a:
  io(out, 0)
  return()
b:
  io(out, 0)
  return()
}
"""
    program = prog(src)
    res = optimize(program, preset="P0")
    spec = None
    verdict = audit_chain_preservation(
        run(program, spec), run(res.program, spec), res.provenance
    )
    assert verdict.passed, verdict.witnesses


# --------------------------------------------------------------------------
# Secret branches
# --------------------------------------------------------------------------

SECRET_INPUT = "desc sec in ordered\n3\n"


def test_branch_on_secret_is_flagged():
    p = prog(
        """
function main() {
  s = io(sec)
  c = s == 0
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    verdict = check_secret_branches(p, ["s"])
    assert not verdict.passed
    assert "branches on c" in verdict.witnesses[0]


def test_branch_on_opacified_secret_is_flagged():
    p = prog(
        """
function main() {
  s = io(sec)
  u = observe_and_opacify(s)
  c = u == 0
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    assert not check_secret_branches(p, SecretSpec.of({"s"})).passed


def test_taint_flows_through_memory():
    p = prog(
        """
function main() {
  s = io(sec)
  mem[4] <- s
  v = mem[4]
  c = v == 1
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    assert not check_secret_branches(p, ["s"]).passed


def test_taint_flows_through_calls_and_returns():
    caller_taints_callee = prog(
        """
function pick(x: u32) {
  c = x < 1
  br c, a, b
a:
  return(0)
b:
  return(1)
}
function main() {
  s = io(sec)
  r = pick(s)
  io(out, r)
  return()
}
"""
    )
    verdict = check_secret_branches(caller_taints_callee, ["s"])
    assert not verdict.passed
    assert verdict.witnesses[0].startswith("pick ")

    callee_taints_caller = prog(
        """
function get() {
  s = io(sec)
  return(s)
}
function main() {
  v = get()
  c = v == 0
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    assert not check_secret_branches(callee_taints_caller, ["s"]).passed


def test_taint_flows_through_block_arguments():
    p = prog(
        """
function main() {
  s = io(sec)
  br next(s)
next(p):
  c = p == 0
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    assert not check_secret_branches(p, ["s"]).passed


def test_masked_select_without_branches_is_clean():
    p = prog(
        """
function main() {
  s = io(sec)
  k = io(inp)
  m = 0 - s
  nm = ~m
  lhs = k & m
  rhs = 7 & nm
  r = lhs | rhs
  io(out, r)
  c = k < 3
  br c, a, b
a:
  io(out, 1)
  return()
b:
  io(out, 2)
  return()
}
"""
    )
    verdict = check_secret_branches(p, ["s"])
    assert verdict.passed, verdict.witnesses


def test_unknown_secret_name_is_an_error():
    p = prog("function main() { io(out, 1)\n return() }")
    with pytest.raises(ValueError):
        check_secret_branches(p, ["ghost"])


# --------------------------------------------------------------------------
# Erasure
# --------------------------------------------------------------------------

ERASURE_PROTECTED = """
function main() {
  s = io(inp)
  mem[0] <- s
  k = mem[0]
  io(out, k)
  mem[0] <- 0
  t = observe_pair(0)
  u = observe_tailio(t)
  return()
}
"""

ERASURE_UNPROTECTED = """
function main() {
  s = io(inp)
  mem[0] <- s
  k = mem[0]
  io(out, k)
  mem[0] <- 0
  return()
}
"""


def test_protected_erasure_survives_the_store_sweep():
    program = prog(ERASURE_PROTECTED)
    res = optimize(program, preset="Ps")
    result = run_ok(res.program, ONE_INPUT)
    verdict = audit_erasure(res.program, result, range(0, 1))
    assert verdict.passed, verdict.witnesses


def test_unprotected_erasure_is_destroyed_and_audited():
    program = prog(ERASURE_UNPROTECTED)
    res = optimize(program, preset="Ps")
    result = run_ok(res.program, ONE_INPUT)
    verdict = audit_erasure(res.program, result, (0, 1))
    assert not verdict.passed
    assert any("mem[0]" in w for w in verdict.witnesses)
    # the same program before optimization is fine
    baseline = audit_erasure(program, run_ok(program, ONE_INPUT), (0, 1))
    assert baseline.passed


def test_erasure_audit_reports_untouched_addresses():
    program = prog(ERASURE_UNPROTECTED)
    result = run_ok(program, ONE_INPUT)
    verdict = audit_erasure(program, result, range(0, 3))
    assert not verdict.passed
    assert "mem[1] never stored" in verdict.witnesses
    assert "mem[2] never stored" in verdict.witnesses


# --------------------------------------------------------------------------
# Interleaving
# --------------------------------------------------------------------------


def test_interleaved_countermeasure_lines_pass():
    p = prog(
        """
function main() {
  a = io(inp)
  x = a + 1; t1 = observe_and_opacify(x); y = t1 + 2
  t2 = observe_and_opacify(y); io(out, y)
  return()
}
"""
    )
    verdict = audit_interleaving(p)
    assert verdict.passed, verdict.witnesses


def test_statement_between_anchors_on_its_own_line_fails():
    p = prog(
        """
function main() {
  a = io(inp)
  x = a + 1; t1 = observe_and_opacify(x)
  y = t1 + 2
  t2 = observe_and_opacify(y); io(out, y)
  return()
}
"""
    )
    verdict = audit_interleaving(p)
    assert not verdict.passed
    assert "strays" in verdict.witnesses[0]


def test_decreasing_lines_fail_the_order_rule():
    p = prog(
        """
function main() {
  a = io(inp)
  b = a + 1
  io(out, b)
  return()
}
"""
    )
    assert audit_interleaving(p).passed
    f = p.function("main")
    block = f.region.blocks[0]
    instrs = list(block.instrs)
    # a scheduler moved the add past the write without renumbering it
    instrs[1], instrs[2] = instrs[2], instrs[1]
    moved = replace(
        p,
        functions=(
            replace(
                f,
                region=replace(f.region, blocks=(replace(block, instrs=tuple(instrs)),)),
            ),
        ),
    )
    verdict = audit_interleaving(moved)
    assert not verdict.passed
    assert any("line order broken" in w for w in verdict.witnesses)


# --------------------------------------------------------------------------
# Report plumbing
# --------------------------------------------------------------------------


def test_check_lines_render_pass_and_fail():
    assert check_line("io_equality", Verdict.ok()) == "CHECK io_equality PASS"
    failing = Verdict.of(["3:1 gone", "4:2 gone"])
    assert check_line("ordering", failing) == "CHECK ordering FAIL 3:1 gone; 4:2 gone"


def test_report_aggregates_optional_checks():
    ok = Verdict.ok()
    bad = Verdict.of(["w"])
    report = ValidationReport(ok, ok, ok, ok)
    assert report.passed
    assert [name for name, _ in report.checks()] == [
        "io_equality",
        "value_integrity_fwd",
        "value_integrity_bwd",
        "ordering",
    ]
    full = ValidationReport(ok, ok, ok, ok, chain_preservation=ok, secret_branch=bad)
    assert not full.passed
    assert full.lines()[-1] == "CHECK secret_branch FAIL w"
    assert full.render().endswith("\n")
