import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnalign import attention as attn
from attnalign.autodiff import Tensor
from attnalign.errors import ParameterError, SelectionError

from oracles import mean_map_loop, refined_map_loop, topk_select_loop, \
    visual_ratio_loop


def make_stack(rng, n_layers=2, n_heads=2, n_visual=4, n_prompt=2, n_answer=3):
    """Random row-stochastic stack respecting the sequence mask."""
    spans = attn.Spans(n_visual, n_prompt, n_answer)
    total = spans.total
    planes = []
    for _ in range(n_layers):
        plane = np.zeros((n_heads, total, total))
        for h in range(n_heads):
            for q in range(total):
                visible = np.zeros(total, dtype=bool)
                visible[:n_visual] = True
                if q >= n_visual:
                    visible[n_visual:q + 1] = True
                raw = rng.random(total) * visible
                plane[h, q] = raw / raw.sum()
        planes.append(Tensor(plane))
    return attn.AttentionStack(planes=planes, spans=spans)


class TestExtractVisualView:
    def test_single_query_row_identity_slice(self, rng):
        stack = make_stack(rng)
        row = stack.spans.total - 1
        view = attn.extract_visual_view(stack, [row])
        for l in range(2):
            for h in range(2):
                expected = stack.head_data(l, h)[row, :4]
                assert np.array_equal(view.per_head[l][h].data[0], expected)

    def test_answer_rows_count(self, rng):
        stack = make_stack(rng, n_answer=3)
        rows = attn.answer_query_rows(stack.spans)
        view = attn.extract_visual_view(stack, rows)
        assert view.per_head[0][0].shape == (3, 4)

    def test_matches_index_lookup_oracle(self, rng):
        stack = make_stack(rng)
        rows = [4, 6, 7]
        view = attn.extract_visual_view(stack, rows)
        for l in range(2):
            for h in range(2):
                m = stack.head_data(l, h)
                for i, q in enumerate(rows):
                    for c in range(4):
                        assert view.per_head[l][h].data[i, c] == m[q, c]

    def test_empty_query_set(self, rng):
        with pytest.raises(SelectionError):
            attn.extract_visual_view(make_stack(rng), [])

    def test_visual_row_rejected(self, rng):
        with pytest.raises(SelectionError):
            attn.extract_visual_view(make_stack(rng), [0])


class TestMeanMap:
    def test_single_head_single_query_identity(self, rng):
        stack = make_stack(rng, n_layers=1, n_heads=1)
        row = stack.spans.total - 1
        view = attn.extract_visual_view(stack, [row])
        out = attn.mean_map(view)
        assert np.max(np.abs(out.data - stack.head_data(0, 0)[row, :4])) < 1e-15

    def test_two_heads_average(self, rng):
        stack = make_stack(rng, n_layers=1, n_heads=2)
        row = stack.spans.total - 1
        view = attn.extract_visual_view(stack, [row])
        out = attn.mean_map(view)
        a = stack.head_data(0, 0)[row, :4]
        b = stack.head_data(0, 1)[row, :4]
        assert np.max(np.abs(out.data - (a + b) / 2)) < 1e-15

    def test_matches_triple_loop_oracle(self, rng):
        stack = make_stack(rng, n_layers=2, n_heads=2, n_answer=3)
        rows = attn.answer_query_rows(stack.spans)
        view = attn.extract_visual_view(stack, rows)
        out = attn.mean_map(view)
        oracle = mean_map_loop([[view.per_head[l][h].data for h in range(2)]
                                for l in range(2)])
        assert np.max(np.abs(out.data - oracle)) < 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_mass_bounded(self, seed):
        r = np.random.default_rng(seed)
        stack = make_stack(r)
        view = attn.extract_visual_view(stack, attn.answer_query_rows(stack.spans))
        out = attn.mean_map(view).data
        assert np.all(out >= 0.0)
        assert out.sum() <= 1.0 + 1e-12


class TestVisualRatio:
    def test_hand_arithmetic(self):
        spans = attn.Spans(2, 2, 1)
        plane = np.zeros((1, 5, 5))
        plane[0, 4] = [0.3, 0.3, 0.2, 0.2, 0.0]
        stack = attn.AttentionStack(planes=[Tensor(plane)], spans=spans)
        assert abs(attn.visual_ratio(stack, 0, 0, [4]) - 0.6) < 1e-15

    def test_all_visual_boundary(self):
        spans = attn.Spans(2, 1, 1)
        plane = np.zeros((1, 4, 4))
        plane[0, 3] = [0.5, 0.5, 0.0, 0.0]
        stack = attn.AttentionStack(planes=[Tensor(plane)], spans=spans)
        assert attn.visual_ratio(stack, 0, 0, [3]) == 1.0

    def test_matches_double_sum_oracle(self, rng):
        stack = make_stack(rng)
        rows = list(attn.answer_query_rows(stack.spans))
        for l in range(2):
            for h in range(2):
                got = attn.visual_ratio(stack, l, h, rows)
                want = visual_ratio_loop(stack.head_data(l, h), rows, 4, 2)
                assert abs(got - want) < 1e-12
        grid = attn.all_visual_ratios(stack, rows)
        for l in range(2):
            for h in range(2):
                assert abs(grid[l, h] - attn.visual_ratio(stack, l, h, rows)) \
                    < 1e-15

    def test_ratio_in_unit_interval(self, rng):
        stack = make_stack(rng)
        grid = attn.all_visual_ratios(stack,
                                      attn.answer_query_rows(stack.spans))
        assert np.all(grid >= 0.0) and np.all(grid <= 1.0)


class TestSelectHeads:
    def test_all_selected_boundary(self):
        sel = attn.select_heads(np.array([[0.1, 0.2], [0.3, 0.4]]), 4)
        assert sel.selected.all() and sel.top_r == 4

    def test_none_selected_alignment_disabled(self):
        sel = attn.select_heads(np.array([[0.1, 0.2], [0.3, 0.4]]), 0)
        assert not sel.selected.any()

    def test_tie_break_row_major(self):
        sel = attn.select_heads(np.full((2, 4), 0.5), 3)
        assert sel.pairs() == [(0, 0), (0, 1), (0, 2)]

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            attn.select_heads(np.zeros((2, 2)), 5)
        with pytest.raises(ParameterError):
            attn.select_heads(np.zeros((2, 2)), -1)

    def test_matches_sort_oracle(self, rng):
        for _ in range(200):
            ratios = rng.integers(0, 5, size=(3, 4)) / 5.0
            r = int(rng.integers(0, 13))
            sel = attn.select_heads(ratios, r)
            flat_selected = sorted(np.flatnonzero(sel.selected.reshape(-1)))
            assert flat_selected == topk_select_loop(ratios.reshape(-1), r)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    @settings(max_examples=25, deadline=None)
    def test_positive_scaling_invariance(self, seed, scale):
        r = np.random.default_rng(seed)
        ratios = r.random((2, 3))
        a = attn.select_heads(ratios, 3)
        b = attn.select_heads(ratios * scale, 3)
        assert np.array_equal(a.selected, b.selected)


class TestRefinedMap:
    def test_single_head_identity(self, rng):
        stack = make_stack(rng)
        rows = attn.answer_query_rows(stack.spans)
        view = attn.extract_visual_view(stack, rows)
        selected = np.zeros((2, 2), dtype=bool)
        selected[1, 0] = True
        sel = attn.HeadSelection(ratios=np.zeros((2, 2)), selected=selected,
                                 top_r=1)
        out = attn.refined_map(view, sel)
        assert np.max(np.abs(out.data - view.per_head[1][0].data.mean(axis=0))) \
            < 1e-15

    def test_all_heads_equals_mean_map(self, rng):
        stack = make_stack(rng)
        rows = attn.answer_query_rows(stack.spans)
        view = attn.extract_visual_view(stack, rows)
        sel = attn.select_heads(np.ones((2, 2)), 4)
        assert np.max(np.abs(attn.refined_map(view, sel).data
                             - attn.mean_map(view).data)) < 1e-12

    def test_matches_masked_loop_oracle(self, rng):
        stack = make_stack(rng)
        rows = attn.answer_query_rows(stack.spans)
        view = attn.extract_visual_view(stack, rows)
        ratios = attn.all_visual_ratios(stack, rows)
        sel = attn.select_heads(ratios, 2)
        out = attn.refined_map(view, sel)
        oracle = refined_map_loop([[view.per_head[l][h].data for h in range(2)]
                                   for l in range(2)], sel.selected)
        assert np.max(np.abs(out.data - oracle)) < 1e-12

    def test_zero_heads_rejected(self, rng):
        stack = make_stack(rng)
        view = attn.extract_visual_view(stack,
                                        attn.answer_query_rows(stack.spans))
        sel = attn.select_heads(np.ones((2, 2)), 0)
        with pytest.raises(ParameterError):
            attn.refined_map(view, sel)


class TestHeatmaps:
    def test_export_files_and_naming(self, tmp_path, rng):
        values = rng.random(16)
        paths = attn.export_heatmaps(tmp_path, "sample7", "mean", values, 4)
        assert [p.name for p in paths] == ["sample7.mean.csv", "sample7.mean.pgm"]
        rows = [line.split(",") for line in
                paths[0].read_text().strip().splitlines()]
        parsed = np.array([[float(v) for v in row] for row in rows])
        assert np.array_equal(parsed, values.reshape(4, 4))
        pgm = paths[1].read_text().splitlines()
        assert pgm[0] == "P2" and pgm[1] == "4 4" and pgm[2] == "255"
        pixels = np.array([int(v) for line in pgm[3:] for v in line.split()])
        assert pixels.max() == 255 and pixels.min() >= 0

    def test_zero_map_pgm(self, tmp_path):
        paths = attn.export_heatmaps(tmp_path, "z", "mean", np.zeros(4), 2)
        pgm = paths[1].read_text().splitlines()
        assert all(v == "0" for line in pgm[3:] for v in line.split())

    def test_grid_mismatch(self):
        with pytest.raises(ParameterError):
            attn.map_to_grid(np.zeros(5), 2)
