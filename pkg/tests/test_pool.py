import multiprocessing

import pytest

from shmchain.errors import (
    DoubleFree,
    DuplicatePrefix,
    InvalidConfig,
    NotPoolOwner,
    OutOfBounds,
    PoolExhausted,
    StaleRef,
    UnknownPrefix,
)
from shmchain.pool import PoolConfig, PoolRegistry


def test_create_pool_all_frames_free(registry):
    pool = registry.create(PoolConfig("mn0", 64, 2048))
    assert pool.free_count == 64
    assert pool.in_flight_count == 0


@pytest.mark.parametrize("count,size", [(1, 2048), (0, 2048), (4, 64), (4, 100),
                                        (4, 3000)])
def test_invalid_config_rejected(count, size):
    with pytest.raises(InvalidConfig):
        PoolConfig("x", count, size).validate()


def test_empty_prefix_rejected():
    with pytest.raises(InvalidConfig):
        PoolConfig("", 4, 2048).validate()


def test_duplicate_prefix(registry):
    registry.create(PoolConfig("mn0", 4, 2048))
    with pytest.raises(DuplicatePrefix):
        registry.create(PoolConfig("mn0", 4, 2048))


def test_attach_unknown_prefix_refused(registry):
    registry.create(PoolConfig("mn0", 4, 2048))
    with pytest.raises(UnknownPrefix):
        registry.attach("evil")


def test_attach_shares_storage(registry):
    pool = registry.create(PoolConfig("mn0", 4, 2048))
    handles = [registry.attach("mn0") for _ in range(3)]
    ref = pool.alloc_frame()
    pool.write_frame(ref, 0, b"\xab" * 100)
    for handle in handles:
        assert handle.read_frame(ref, 0, 100) == b"\xab" * 100


def test_capacity_and_exhaustion(registry):
    pool = registry.create(PoolConfig("mn0", 2, 2048))
    pool.alloc_frame()
    pool.alloc_frame()
    with pytest.raises(PoolExhausted):
        pool.alloc_frame()


def test_alloc_free_alloc_same_index_new_generation(pool):
    first = pool.alloc_frame()
    pool.free_frame(first)
    second = pool.alloc_frame()
    assert second.index == first.index
    assert second.generation != first.generation


def test_conservation_after_full_cycle(pool):
    refs = [pool.alloc_frame() for _ in range(64)]
    assert pool.free_count == 0
    for ref in refs:
        pool.free_frame(ref)
    assert pool.free_count == 64


def test_stale_ref_after_free(pool):
    ref = pool.alloc_frame()
    pool.free_frame(ref)
    pool.alloc_frame()  # reuse the slot
    with pytest.raises(StaleRef):
        pool.read_frame(ref, 0, 1)
    with pytest.raises(StaleRef):
        pool.free_frame(ref)


def test_double_free_detected(pool):
    ref = pool.alloc_frame()
    pool.free_frame(ref)
    with pytest.raises(DoubleFree):
        pool.free_frame(ref)


def test_write_read_round_trip(pool):
    ref = pool.alloc_frame()
    pool.write_frame(ref, 0, b"\xab" * 100)
    assert pool.read_frame(ref, 0, 100) == b"\xab" * 100


def test_out_of_bounds(pool):
    ref = pool.alloc_frame()
    with pytest.raises(OutOfBounds):
        pool.write_frame(ref, 2047, b"xx")
    with pytest.raises(OutOfBounds):
        pool.read_frame(ref, 2040, 9)
    with pytest.raises(OutOfBounds):
        pool.frame_view(ref, -1, 4)


def test_isolation_between_prefixes(registry):
    a = registry.create(PoolConfig("pa", 4, 2048))
    b = registry.create(PoolConfig("pb", 4, 2048))
    ref_a = a.alloc_frame()
    a.write_frame(ref_a, 0, b"AAAA")
    ref_b = b.alloc_frame()
    b.write_frame(ref_b, 0, b"BBBB")
    assert a.read_frame(ref_a, 0, 4) == b"AAAA"
    assert b.read_frame(ref_b, 0, 4) == b"BBBB"


def _child_attach(registry_dir, prefix, index, out):
    reg = PoolRegistry(registry_dir=registry_dir)
    handle = reg.attach(prefix)
    from shmchain.pool import FrameRef
    ref = FrameRef(index, 1)
    data = handle.read_frame(ref, 0, 8)
    handle.write_frame(ref, 8, b"reply!!!")
    handle.close()
    out.put(bytes(data))


def test_multiprocess_attach_shares_frames(tmp_path):
    reg = PoolRegistry(registry_dir=tmp_path)
    pool = reg.create(PoolConfig("shared0", 8, 2048), shared=True)
    try:
        ref = pool.alloc_frame()
        assert ref.index == 0 and ref.generation == 1
        pool.write_frame(ref, 0, b"hello-mp")
        ctx = multiprocessing.get_context("fork")
        out = ctx.Queue()
        proc = ctx.Process(target=_child_attach,
                           args=(tmp_path, "shared0", ref.index, out))
        proc.start()
        assert out.get(timeout=10) == b"hello-mp"
        proc.join(timeout=10)
        assert pool.read_frame(ref, 8, 8) == b"reply!!!"
    finally:
        reg.clear()


def test_secondary_attach_cannot_allocate(tmp_path):
    reg = PoolRegistry(registry_dir=tmp_path)
    reg.create(PoolConfig("shared1", 8, 2048), shared=True)
    try:
        other = PoolRegistry(registry_dir=tmp_path)
        handle = other.attach("shared1")
        with pytest.raises(NotPoolOwner):
            handle.alloc_frame()
        handle.close()
    finally:
        reg.clear()
