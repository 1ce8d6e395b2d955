import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molan.blocking import (
    BlockingMode,
    BlockPlan,
    BlockSet,
    StructureError,
    block_objective,
    factor_set,
    highly_composite_at_least,
    optimal_block_params,
    partition,
    plan_with_sizes,
    reassemble,
)
from molan.numerics import DomainError, Tensor

from oracles import best_factor, best_pair, trial_division_factors


def test_factor_sets():
    assert factor_set(1) == [1]
    assert factor_set(16) == [1, 2, 4, 8, 16]
    assert factor_set(375) == trial_division_factors(375) == [1, 3, 5, 15, 25, 75, 125, 375]
    with pytest.raises(DomainError):
        factor_set(0)


def test_factor_sets_match_trial_division():
    for m in range(1, 400):
        assert factor_set(m) == trial_division_factors(m)


def test_known_optima():
    plan = optimal_block_params(16, 16, "two_dimensional")
    assert (plan.block_rows, plan.block_cols) == (4, 4)
    assert block_objective(4, 4, 16, 16) == 0.0
    assert optimal_block_params(375, 20, "one_dimensional").block_cols == 15
    plan = optimal_block_params(20, 16)
    assert (plan.block_rows, plan.block_cols) == best_pair(20, 16) == (4, 4)


def test_two_d_objective_minimal_over_all_pairs():
    for m, n in [(12, 16), (20, 16), (375, 20), (500, 20), (97, 30), (360, 7)]:
        plan = optimal_block_params(m, n)
        best = block_objective(plan.block_rows, plan.block_cols, m, n)
        for k in factor_set(m):
            for j in factor_set(n):
                assert best <= block_objective(k, j, m, n)


def test_joint_exhaustive_oracle_on_sample(rng):
    for m, n in rng.integers(1, 1025, size=(150, 2)):
        plan = optimal_block_params(int(m), int(n))
        assert (plan.block_rows, plan.block_cols) == best_pair(int(m), int(n))


def test_ties_go_to_smaller_factor():
    for m in range(1, 300):
        root = math.sqrt(m)
        objs = {d: (d / root - 1) ** 2 for d in factor_set(m)}
        best = min(objs.values())
        assert optimal_block_params(m, 5, "one_dimensional").block_cols == min(d for d, o in objs.items() if o == best)


def test_prime_axis_degenerates():
    plan = optimal_block_params(13, 4, "one_dimensional")
    assert plan.block_cols in (1, 13)
    padded = optimal_block_params(13, 4, "one_dimensional", pad=True)
    assert padded.source_shape == (highly_composite_at_least(13), 4) == (24, 4)


def test_one_d_blocks_span_features(rng):
    x = rng.normal(size=(2, 12, 5))
    plan = optimal_block_params(12, 5, "one_dimensional")
    blocks = partition(Tensor(x), plan)
    assert plan.grid_cols == 1
    for p in range(plan.grid_rows):
        assert blocks.block(p, 0).shape == (2, plan.block_cols, 5)
    with pytest.raises(DomainError):
        optimal_block_params(12, None, "one_dimensional")


def test_partition_quadrants():
    x = np.arange(16.0).reshape(1, 4, 4)
    plan = plan_with_sizes((4, 4), "two_dimensional", (2, 2))
    blocks = partition(Tensor(x), plan)
    assert plan.num_blocks == 4
    assert np.array_equal(blocks.block(0, 0).data[0], x[0, :2, :2])
    assert np.array_equal(blocks.block(1, 1).data[0], x[0, 2:, 2:])


def test_single_block_identity(rng):
    x = rng.normal(size=(3, 5, 7))
    plan = plan_with_sizes((5, 7), "two_dimensional", (5, 7))
    blocks = partition(Tensor(x), plan)
    assert np.array_equal(blocks.block(0, 0).data, x)
    assert np.array_equal(reassemble(blocks).data, x)


def test_six_by_nine_round_trip(rng):
    x = rng.normal(size=(1, 6, 9))
    plan = plan_with_sizes((6, 9), "two_dimensional", (3, 3))
    blocks = partition(Tensor(x), plan)
    assert plan.num_blocks == 6
    rows = [np.concatenate([b.data[0] for b in row], axis=1) for row in blocks.grid]
    assert np.array_equal(np.concatenate(rows, axis=0), x[0])


def test_blockwise_scaling_oracle(rng):
    x = rng.normal(size=(2, 6, 8))
    plan = plan_with_sizes((6, 8), "two_dimensional", (3, 2))
    c = rng.normal(size=(2, 2, 4))
    blocks = partition(Tensor(x), plan)
    scaled = BlockSet(plan, Tensor(blocks.stacked.data * c[:, :, :, None, None]))
    expected = x.copy()
    for b in range(2):
        for p in range(2):
            for q in range(4):
                expected[b, p * 3:(p + 1) * 3, q * 2:(q + 1) * 2] *= c[b, p, q]
    assert np.array_equal(reassemble(scaled).data, expected)


def test_round_trip_200_random_cases(rng):
    for _ in range(200):
        m, n = (int(v) for v in rng.integers(1, 41, size=2))
        b = int(rng.integers(1, 4))
        x = rng.normal(size=(b, m, n))
        if rng.random() < 0.5:
            plan = plan_with_sizes((m, n), "two_dimensional", (int(rng.choice(factor_set(m))), int(rng.choice(factor_set(n)))))
        else:
            plan = plan_with_sizes((m, n), "one_dimensional", int(rng.choice(factor_set(m))))
        assert np.array_equal(reassemble(partition(Tensor(x), plan)).data, x)


def test_padded_plan_round_trip(rng):
    x = rng.normal(size=(2, 13, 7))
    plan = optimal_block_params(13, 7, pad=True)
    assert plan.source_shape == (24, 12)
    blocks = partition(Tensor(x), plan)
    assert np.array_equal(reassemble(blocks).data, x)


def test_structure_errors(rng):
    plan = plan_with_sizes((4, 4), "two_dimensional", (2, 2))
    blocks = [[np.zeros((1, 2, 2)), np.zeros((1, 2, 2))], [np.zeros((1, 2, 2)), None]]
    with pytest.raises(StructureError):
        BlockSet.from_grid(plan, blocks)
    blocks[1][1] = np.zeros((1, 3, 2))
    with pytest.raises(StructureError):
        BlockSet.from_grid(plan, blocks)
    with pytest.raises(StructureError):
        BlockPlan(BlockingMode.TWO_D, 3, 2, 1, 2, (4, 4))
    with pytest.raises(DomainError):
        plan_with_sizes((4, 4), "two_dimensional", (3, 2))


def test_from_grid_round_trip(rng):
    x = rng.normal(size=(2, 6, 4))
    plan = plan_with_sizes((6, 4), "two_dimensional", (2, 2))
    blocks = partition(Tensor(x), plan)
    rebuilt = BlockSet.from_grid(plan, blocks.grid)
    assert np.array_equal(reassemble(rebuilt).data, x)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60))
def test_optimum_matches_oracle_property(m, n):
    plan = optimal_block_params(m, n)
    assert (plan.block_rows, plan.block_cols) == (best_factor(m), best_factor(n))
    assert m % plan.block_rows == 0 and n % plan.block_cols == 0
    assert plan.grid_shape == (m // plan.block_rows, n // plan.block_cols)
