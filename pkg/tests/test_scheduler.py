import math
import random
from fractions import Fraction

import pytest

from zpsim.core import ExpertAssignment, InfeasibleError, ValidationError
from zpsim import simulator
from zpsim.scheduler import (
    ATTN_LANE,
    COMB_LANE,
    DISP_LANE,
    EXP_LANE,
    OffloadPlanInputs,
    SearchBoundExceeded,
    asym_ea_offload,
    brute_force_offload,
    brute_force_schedule,
    bubble_ledger,
    chunk_sizes,
    comm_order,
    compute_l_busy,
    default_orders,
    exhaustive_min_makespan,
    zp_compute_order,
)
from zpsim.taskgraph import build_distep_graph, build_zp_graph

from conftest import table_durations, table_spec


def names(graph, ids):
    return [
        f"{graph.tasks[t].kind.value}{graph.tasks[t].layer},{graph.tasks[t].microbatch}" for t in ids
    ]


class TestChunkSizes:
    def test_symmetric(self):
        assert chunk_sizes(1, 1) == (1, 1)
        assert chunk_sizes(4, 4) == (1, 1)

    def test_more_expert_gpus(self):
        assert chunk_sizes(4, 8) == (2, 1)

    def test_more_attention_gpus(self):
        assert chunk_sizes(4, 2) == (1, 2)

    def test_divisibility_required(self):
        with pytest.raises(ValidationError):
            chunk_sizes(4, 3)


class TestComputeOrder:
    def test_attention_lane_l2_r2(self):
        g = build_zp_graph(table_spec(L=2, R=2), table_durations(), mode="zp-theorem")
        order = zp_compute_order(g)
        assert names(g, order[ATTN_LANE]) == [
            "AttnF1,1",
            "AttnF1,2",
            "AttnF2,1",
            "AttnB2,1",
            "AttnF2,2",
            "AttnB2,2",
            "AttnB1,1",
            "AttnB1,2",
        ]

    def test_expert_lane_l2_r2(self):
        g = build_zp_graph(table_spec(L=2, R=2), table_durations(), mode="zp-theorem")
        order = zp_compute_order(g)
        assert names(g, order[EXP_LANE]) == ["ExpF1,1", "ExpF1,2", "ExpB1,1", "ExpB1,2"]

    def test_single_layer_interleave(self):
        g = build_zp_graph(table_spec(L=1, R=3, n=1, k=1), table_durations(), mode="zp-theorem")
        order = zp_compute_order(g)
        assert names(g, order[ATTN_LANE]) == [
            "AttnF1,1",
            "AttnB1,1",
            "AttnF1,2",
            "AttnB1,2",
            "AttnF1,3",
            "AttnB1,3",
        ]
        assert order[EXP_LANE] == []

    def test_offload_tasks_after_layer_block(self):
        g = build_zp_graph(
            table_spec(), table_durations(), assignment=ExpertAssignment((0, 2, 0)), mode="zp-full"
        )
        lane = names(g, zp_compute_order(g)[ATTN_LANE])
        idx = lane.index("OffExpF2,1")
        assert lane[idx - 1] == "AttnF2,3"  # after all R attention tasks of layer 2
        assert lane[idx + 1 :][:2] == ["OffExpF2,2", "OffExpF2,3"]

    def test_backward_offload_before_layer_block(self):
        g = build_zp_graph(
            table_spec(), table_durations(), assignment=ExpertAssignment((2, 0, 0)), mode="zp-full"
        )
        lane = names(g, zp_compute_order(g)[ATTN_LANE])
        idx = lane.index("OffExpB1,1")
        assert lane[idx + 3 : idx + 6] == ["AttnB1,1", "AttnB1,2", "AttnB1,3"]


class TestCommOrder:
    def test_single_chain(self):
        g = build_zp_graph(table_spec(L=2, R=1), table_durations(), include_backward=False)
        orders = comm_order(g, zp_compute_order(g))
        assert names(g, orders[DISP_LANE]) == ["DispF1,1", "DispF2,1"]
        assert names(g, orders[COMB_LANE]) == ["CombF1,1", "CombF2,1"]

    def test_follows_producer_positions(self):
        g = build_zp_graph(table_spec(L=2, R=2), table_durations(), mode="zp-theorem")
        orders = comm_order(g, zp_compute_order(g))
        assert names(g, orders[DISP_LANE]) == ["DispF1,1", "DispF1,2", "DispB1,1", "DispB1,2"]
        assert names(g, orders[COMB_LANE]) == ["CombF1,1", "CombF1,2", "CombB1,1", "CombB1,2"]

    def test_orders_cover_all_tasks(self):
        g = build_zp_graph(table_spec(L=3, R=2), table_durations(), mode="zp-full")
        orders = default_orders(g)
        covered = [tid for lane in orders.values() for tid in lane]
        assert sorted(covered) == [t.id for t in g.tasks]


class TestAsymEa:
    def fig_inputs(self, **kwargs):
        base = dict(
            experts_per_layer=6,
            layers=3,
            attention_gpus=1,
            expert_gpus=1,
            attn_fwd=Fraction(3),
            single_expert_on_attn=Fraction(3),
            expert_layer_on_expert=Fraction(4),
        )
        base.update(kwargs)
        return OffloadPlanInputs(**base)

    def test_slow_expert_scenario_plan(self):
        plan = asym_ea_offload(self.fig_inputs())
        assert plan.assignment.offload == (0, 1, 1)
        assert plan.t_gather == 1
        assert plan.t_squeeze == Fraction(7, 6)

    def test_upper_bound_single_chunk(self):
        plan = asym_ea_offload(self.fig_inputs(n_max=1))
        assert plan.alpha == Fraction(7, 18)
        assert plan.beta == 1
        assert plan.assignment.offload == (0, 0, 1)

    def test_no_bubbles_to_squeeze(self):
        plan = asym_ea_offload(self.fig_inputs(expert_layer_on_expert=Fraction(3)))
        assert plan.assignment.offload == (0, 0, 0)
        assert plan.note == "no bubbles to squeeze"

    def test_memory_needs_gather_error(self):
        with pytest.raises(InfeasibleError):
            asym_ea_offload(self.fig_inputs(expert_layer_on_expert=Fraction(2), n_min=1))

    def test_contradictory_bounds(self):
        with pytest.raises(InfeasibleError):
            asym_ea_offload(self.fig_inputs(n_min=3, n_max=1))

    def test_residual_invariant(self):
        plan = asym_ea_offload(self.fig_inputs())
        for residual in plan.residuals:
            assert 0 <= residual < plan.t_squeeze

    def test_lower_bound_met_exactly(self):
        # beta pushes the total to exactly ceil(n_min/n_2) chunks
        plan = asym_ea_offload(self.fig_inputs(attn_fwd=Fraction(39, 10), n_min=4))
        assert plan.beta > 1
        assert plan.assignment.total == 4
        assert plan.residuals[-1] == 0

    def test_squeeze_modes_coincide_when_m_equals_n(self):
        verbatim = asym_ea_offload(self.fig_inputs(squeeze_mode="verbatim"))
        rederived = asym_ea_offload(self.fig_inputs(squeeze_mode="rederived"))
        assert verbatim.t_squeeze == rederived.t_squeeze
        assert verbatim.assignment == rederived.assignment

    def test_squeeze_modes_differ_otherwise(self):
        kwargs = dict(
            experts_per_layer=8,
            attention_gpus=2,
            expert_gpus=1,
            single_expert_on_attn=Fraction(2),
        )
        verbatim = asym_ea_offload(self.fig_inputs(squeeze_mode="verbatim", **kwargs))
        rederived = asym_ea_offload(self.fig_inputs(squeeze_mode="rederived", **kwargs))
        assert verbatim.t_squeeze != rederived.t_squeeze

    def test_chunk_multiples(self):
        plan = asym_ea_offload(
            self.fig_inputs(
                experts_per_layer=8,
                attention_gpus=2,
                expert_gpus=1,
                expert_layer_on_expert=Fraction(6),
            )
        )
        _, n2 = plan.chunk
        assert n2 == 2
        assert all(o % n2 == 0 for o in plan.assignment.offload)


class TestLBusy:
    def test_values(self):
        assert compute_l_busy(4, 3) == 4
        assert compute_l_busy(2, 1) == 2

    def test_unbounded(self):
        assert compute_l_busy(3, 3) == math.inf
        assert compute_l_busy(2, 5) == math.inf

    def test_ledger_identity(self):
        # accumulated bubble after L_busy layers equals the expert time
        inputs = OffloadPlanInputs(6, 8, 1, 1, Fraction(3), Fraction(3), Fraction(4))
        ledger = bubble_ledger(inputs)
        l_busy = compute_l_busy(4, 3)
        assert ledger[int(l_busy) - 1] == 4


class TestBruteForceOffload:
    def spec_and_sim(self, spec, durations):
        def sim(assignment):
            g = build_zp_graph(spec, durations, assignment=assignment, mode="zp-full", include_backward=False)
            return simulator.simulate(g, default_orders(g)).makespan

        return sim

    def test_no_gather_keeps_zeros_optimal(self):
        # attention is the bottleneck and is no faster per expert token, so
        # moving expert work onto it can never pay off
        spec = table_spec(attn_fwd=4000, expert_fwd=3000, single_expert=6000, R=4)
        sim = self.spec_and_sim(spec, table_durations(4000, 3000, 6000))
        inputs = OffloadPlanInputs(6, 3, 1, 1, Fraction(4000), Fraction(6000), Fraction(3000))
        best, makespan = brute_force_offload(inputs, sim, per_layer_chunk_cap=1)
        assert best.offload == (0, 0, 0)
        assert makespan == sim(ExpertAssignment.zeros(3))

    def test_beats_or_matches_heuristic_plan(self, offload_demo_spec):
        sim = self.spec_and_sim(offload_demo_spec, table_durations(3000, 4000, 3000))
        inputs = OffloadPlanInputs(6, 3, 1, 1, Fraction(3000), Fraction(3000), Fraction(4000))
        _, best_makespan = brute_force_offload(inputs, sim, per_layer_chunk_cap=1)
        assert best_makespan <= sim(ExpertAssignment((0, 1, 1)))

    def test_single_layer_line_search(self):
        spec = table_spec(L=1, R=6, attn_fwd=3000, expert_fwd=6000, single_expert=2000)
        sim = self.spec_and_sim(spec, table_durations(3000, 6000, 2000))
        best, _ = brute_force_offload(
            OffloadPlanInputs(6, 1, 1, 1, Fraction(3000), Fraction(2000), Fraction(6000)),
            sim,
            per_layer_chunk_cap=3,
        )
        candidates = {(o,): sim(ExpertAssignment((o,))) for o in range(4)}
        assert candidates[best.offload] == min(candidates.values())

    def test_lexicographic_tie_break(self):
        calls = []

        def flat(assignment):
            calls.append(assignment.offload)
            return 100  # every assignment ties

        inputs = OffloadPlanInputs(4, 2, 1, 1, Fraction(1), Fraction(1), Fraction(2))
        best, _ = brute_force_offload(inputs, flat, per_layer_chunk_cap=1)
        assert best.offload == (0, 0)
        assert calls[0] == (0, 0)

    def test_bound_enforced(self):
        inputs = OffloadPlanInputs(8, 6, 1, 1, Fraction(1), Fraction(1), Fraction(2))
        with pytest.raises(SearchBoundExceeded):
            brute_force_offload(inputs, lambda a: 0, per_layer_chunk_cap=8, search_bound=10)


class TestBruteForceSchedule:
    def test_single_task(self):
        g = build_zp_graph(
            table_spec(L=1, R=1, n=1, k=1, attn_fwd=5), table_durations(5), include_backward=False,
            mode="zp-theorem",
        )
        assert brute_force_schedule(g) == 5

    def test_two_microbatches_symmetric(self):
        spec = table_spec(L=1, R=2, n=1, k=1, attn_fwd=4, gamma=Fraction(1))
        g = build_zp_graph(spec, table_durations(4, gamma=Fraction(1)), mode="zp-theorem")
        # four equal attention tasks on one lane: any order gives 16
        assert brute_force_schedule(g) == 16

    def test_matches_exhaustive_enumeration(self):
        rng = random.Random(20)
        for _ in range(25):
            L, R = rng.choice([(1, 2), (2, 1), (1, 3), (2, 2)])
            gamma = rng.choice([Fraction(1), Fraction(2)])
            d = table_durations(
                rng.randint(1, 10), rng.randint(1, 10), 1, rng.randint(0, 3), rng.randint(0, 3), gamma
            )
            spec = table_spec(L=L, R=R, gamma=gamma)
            g = build_zp_graph(spec, d, mode="zp-theorem")
            assert brute_force_schedule(g) == exhaustive_min_makespan(g)

    def test_bound_enforced(self):
        g = build_zp_graph(table_spec(L=3, R=3), table_durations(), mode="zp-theorem")
        with pytest.raises(SearchBoundExceeded):
            brute_force_schedule(g, search_bound=3)

    def test_rejects_offload_graphs(self):
        g = build_zp_graph(
            table_spec(), table_durations(), assignment=ExpertAssignment((0, 1, 1)), mode="zp-full"
        )
        with pytest.raises(ValueError):
            brute_force_schedule(g)

    def test_rejects_distep(self):
        g = build_distep_graph(table_spec(L=1, R=2), table_durations())
        with pytest.raises(ValueError):
            brute_force_schedule(g)

    def test_rejects_full_zp_with_backward(self):
        g = build_zp_graph(table_spec(L=2, R=2), table_durations(), mode="zp-full")
        with pytest.raises(ValueError):
            brute_force_schedule(g)
