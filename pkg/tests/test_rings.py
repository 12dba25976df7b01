import pytest

from shmchain.errors import FillRingFull, InvalidCapacity
from shmchain.rings import DescriptorRing, NicRingSet, RingPair


def test_new_ring_empty():
    ring = DescriptorRing(8)
    assert len(ring) == 0
    assert ring.capacity == 8


@pytest.mark.parametrize("cap", [6, 0, 1, 3, 1000])
def test_capacity_must_be_power_of_two(cap):
    with pytest.raises(InvalidCapacity):
        DescriptorRing(cap)


def test_smallest_legal_ring():
    ring = DescriptorRing(2)
    assert ring.enqueue("a") and ring.enqueue("b")
    assert not ring.enqueue("c")


def test_capacity_then_full():
    ring = DescriptorRing(8)
    for i in range(8):
        assert ring.enqueue(i)
    assert not ring.enqueue(8)


def test_fifo_order():
    ring = DescriptorRing(8)
    ring.enqueue("d1")
    ring.enqueue("d2")
    assert ring.dequeue() == "d1"
    assert ring.dequeue() == "d2"
    assert ring.dequeue() is None


def test_space_reclaimed_after_dequeue():
    ring = DescriptorRing(4)
    for i in range(4):
        ring.enqueue(i)
    assert not ring.enqueue(99)
    ring.dequeue()
    assert ring.enqueue(99)


def test_burst_dequeue_partial():
    ring = DescriptorRing(8)
    for i in range(3):
        ring.enqueue(i)
    assert ring.burst_dequeue(8) == [0, 1, 2]
    assert ring.burst_dequeue(8) == []


def test_burst_dequeue_leaves_remainder():
    ring = DescriptorRing(16)
    for i in range(10):
        ring.enqueue(i)
    assert ring.burst_dequeue(4) == [0, 1, 2, 3]
    assert len(ring) == 6


def test_ring_pair_distinct():
    pair = RingPair.new(8)
    assert pair.rx is not pair.tx


def test_cycle_moves_all():
    rs = NicRingSet.new(8)
    for i in range(5):
        rs.completion.enqueue(i)
    assert rs.cycle() == 5
    assert len(rs.completion) == 0
    assert rs.fill.burst_dequeue(8) == [0, 1, 2, 3, 4]


def test_cycle_empty_completion():
    rs = NicRingSet.new(8)
    assert rs.cycle() == 0


def test_cycle_fill_full():
    rs = NicRingSet.new(4)
    for i in range(4):
        rs.fill.enqueue(f"f{i}")
    rs.completion.enqueue("c0")
    with pytest.raises(FillRingFull):
        rs.cycle()
    assert len(rs.completion) == 1


def test_cycle_partial_when_fill_tightens():
    rs = NicRingSet.new(4)
    rs.fill.enqueue("f0")
    rs.fill.enqueue("f1")
    for i in range(4):
        rs.completion.enqueue(i)
    assert rs.cycle() == 2
    assert len(rs.completion) == 2
