import itertools
import math

import numpy as np
import pytest

from cnntsp.baselines import held_karp, nearest_neighbor, two_opt
from cnntsp.errors import InstanceTooLarge, InvalidArgument
from cnntsp.instances import TspInstance, tour_length, uniform_coords, validate_tour

SQUARE = TspInstance(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float))


def brute_force_optimum(coords):
    n = len(coords)
    perms = np.array([(0,) + p for p in itertools.permutations(range(1, n))])
    pts = coords[perms]
    lengths = np.sqrt(((pts - np.roll(pts, -1, axis=1)) ** 2).sum(-1)).sum(-1)
    return float(lengths.min())


def greedy_trace(coords, start):
    n = len(coords)
    order = [start]
    left = set(range(n)) - {start}
    while left:
        cur = order[-1]
        nxt = min(left, key=lambda j: (math.dist(coords[cur], coords[j]), j))
        order.append(nxt)
        left.remove(nxt)
    return order


def has_improving_exchange(coords, order, eps=1e-12):
    n = len(order)
    d = lambda a, b: math.dist(coords[a], coords[b])
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            a, b, c, e = order[i], order[i + 1], order[j], order[(j + 1) % n]
            if d(a, c) + d(b, e) < d(a, b) + d(c, e) - eps:
                return True
    return False


class TestNearestNeighbor:
    def test_collinear(self):
        c = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        t = nearest_neighbor(c, 0)
        assert t.order == (0, 1, 2)
        assert t.length == pytest.approx(4.0)

    def test_square(self):
        assert nearest_neighbor(SQUARE, 0).length == pytest.approx(4.0)

    @pytest.mark.parametrize("start", [0, 4, 8])
    def test_matches_greedy_trace(self, start):
        c = uniform_coords(9, 1, 21)[0]
        assert list(nearest_neighbor(c, start).order) == greedy_trace(c, start)

    def test_invalid_start(self):
        with pytest.raises(InvalidArgument):
            nearest_neighbor(SQUARE, 4)


class TestTwoOpt:
    def test_optimal_square_unchanged(self):
        assert two_opt(SQUARE, [0, 1, 2, 3]).order == (0, 1, 2, 3)

    def test_default_start_is_nearest_neighbor(self):
        inst = TspInstance(uniform_coords(9, 1, 3)[0])
        assert two_opt(inst) == two_opt(inst, nearest_neighbor(inst, 0))

    def test_uncrosses(self):
        start = tour_length(SQUARE, [0, 2, 1, 3])
        assert start == pytest.approx(2 + 2 * math.sqrt(2))
        assert two_opt(SQUARE, [0, 2, 1, 3]).length == pytest.approx(4.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_sandwich_and_local_optimality(self, seed):
        inst = TspInstance(uniform_coords(10, 1, seed)[0])
        nn = nearest_neighbor(inst, 0)
        res = two_opt(inst, nn)
        assert validate_tour(res.order, 10) is None
        assert res.length <= nn.length + 1e-12
        assert res.length >= held_karp(inst).length - 1e-12
        assert not has_improving_exchange(inst.coords, list(res.order))


class TestHeldKarp:
    def test_triangle(self):
        c = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        assert held_karp(c).length == pytest.approx(12.0)

    def test_square(self):
        assert held_karp(SQUARE).length == pytest.approx(4.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_enumeration_n9(self, seed):
        c = uniform_coords(9, 1, 100 + seed)[0]
        assert held_karp(c).length == pytest.approx(brute_force_optimum(c), rel=1e-12)

    def test_limits(self):
        with pytest.raises(InstanceTooLarge):
            held_karp(uniform_coords(17, 1, 0)[0])
        with pytest.raises(InvalidArgument):
            held_karp(uniform_coords(2, 1, 0)[0])

    def test_lower_bound_on_other_solvers(self):
        for seed in range(5):
            inst = TspInstance(uniform_coords(11, 1, seed)[0])
            opt = held_karp(inst).length
            for start in range(11):
                nn = nearest_neighbor(inst, start)
                assert opt <= nn.length + 1e-12
                assert opt <= two_opt(inst, nn).length + 1e-12
