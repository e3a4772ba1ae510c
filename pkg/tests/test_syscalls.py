import pytest
from hypothesis import given
from hypothesis import strategies as st

from taforge.engine import MachineState
from taforge.errors import ConfigError
from taforge.memory import HEAP, OOB_READ, MemFault
from taforge.profiles import PROFILES
from taforge.rewriter import SvcSite
from taforge.syscalls import (FIRST_FD, PROT_READ, PROT_WRITE, TABLES, DeviceModel, ScriptEntry,
                              dispatch, format_device_script, mmap_region, open_device,
                              parse_device_script, table_for)

from conftest import load

CRYPTO = "dev://crypto"
RESPONSE = bytes(range(0xA0, 0xB0))


@pytest.fixture
def teegris(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    dev = DeviceModel({CRYPTO: [ScriptEntry(RESPONSE)]})
    state = MachineState(image, devices=dev)
    heap = image.vas.allocate(0x2000, "RW", HEAP, "scratch")
    return state, dev, heap.base


def sys(state, name, *args, table=None):
    table = table or state.table
    for i, a in enumerate(args):
        state.R[table.arg_registers[i]] = a
    num = table.number_of(name)
    if table.number_register is not None:
        state.R[table.number_register] = num
        site = SvcSite(0x401000, 0, 0xD4000001)
    else:
        site = SvcSite(0x401000, num, 0xD4000001 | (num << 5))
    return dispatch(table, state, site, state.devices)


def test_scripted_read_after_open(teegris):
    state, dev, buf = teegris
    state.vas.write_bytes(buf, CRYPTO.encode() + b"\0")
    fd = sys(state, "open", buf, 0)
    assert fd == FIRST_FD
    assert sys(state, "read", fd, buf + 0x100, 16) == 16
    assert state.vas.read_bytes(buf + 0x100, 16) == RESPONSE
    assert state.syscalls[-1][2] == "read"


def test_unknown_number_returns_generic_error(teegris):
    state, dev, _ = teegris
    site = SvcSite(0x401000, 0x7777, 0)
    assert dispatch(state.table, state, site, dev) == state.profile.error_code
    assert state.syscalls[-1][2] == "unsupported"


def test_write_from_unmapped_buffer_faults(teegris):
    state, dev, buf = teegris
    state.vas.write_bytes(buf, CRYPTO.encode() + b"\0")
    fd = sys(state, "open", buf, 0)
    with pytest.raises(MemFault) as e:
        sys(state, "write", fd, 0x20, 16)
    assert e.value.kind == OOB_READ


def test_fd_allocation():
    dev = DeviceModel({CRYPTO: []})
    err = PROFILES["OPTEE"].error_code
    assert open_device(dev, CRYPTO) == 3
    assert open_device(dev, "dev://missing") == err
    assert open_device(dev, CRYPTO) == 4          # the failed open consumed nothing


def test_mmap(teegris):
    state, _, _ = teegris
    a = mmap_region(state, 1, PROT_READ | PROT_WRITE)
    assert a % 4096 == 0 and state.vas.region_at(a).length == 4096
    assert mmap_region(state, 0, PROT_READ) == state.profile.error_code
    b = mmap_region(state, 5000, PROT_READ)
    ra, rb = state.vas.region_at(a), state.vas.region_at(b)
    assert ra is not rb and (ra.end <= rb.base or rb.end <= ra.base)


def test_same_number_means_different_handlers_per_profile():
    assert TABLES["OPTEE"].handler_for(3) == "read"
    assert TABLES["TRUSTY"].handler_for(3) == "close"


def test_dispatch_consults_only_the_active_table(teegris):
    state, dev, buf = teegris
    state.vas.write_bytes(buf, CRYPTO.encode() + b"\0")
    fd = sys(state, "open", buf, 0)
    site = SvcSite(0x401000, 3, 0)
    state.R[0], state.R[1], state.R[2] = fd, buf + 0x200, 16
    assert dispatch(TABLES["OPTEE"], state, site, dev) == 16            # read
    assert dispatch(TABLES["TRUSTY"], state, site, dev) == 0            # close
    assert fd not in dev.fds


def test_qsee_number_travels_in_x7():
    t = table_for("QSEE")
    assert t.number_source == "REGISTER" and t.number_register == 7
    assert table_for(PROFILES["QSEE"]) is t


def test_device_script_round_trip():
    text = "device dev://crypto\nrespond a0a1 status 0\nrespond - status -1 match 01\n"
    scripts = parse_device_script(text)
    assert scripts[CRYPTO][1] == ScriptEntry(b"", -1, b"\x01")
    assert parse_device_script(format_device_script(scripts)) == scripts


def test_bad_device_script():
    with pytest.raises(ConfigError):
        parse_device_script("respond 00\n")


def test_alloc_free_cycle(teegris):
    state, _, _ = teegris
    p = sys(state, "alloc", 100)
    assert p and state.vas.region_at(p).kind == HEAP
    assert sys(state, "free", p) == 0
    assert state.vas.region_at(p) is None
    assert sys(state, "free", p) == state.profile.error_code


@given(st.lists(st.binary(min_size=1, max_size=24), min_size=1, max_size=5),
       st.lists(st.integers(0, 32), min_size=1, max_size=8))
def test_script_determinism(responses, reads):
    """Same script and same requests give the same return sequence."""
    def run():
        dev = DeviceModel({CRYPTO: [ScriptEntry(r) for r in responses]})
        fd = open_device(dev, CRYPTO)
        out = []
        for n in reads:
            e = dev.next_response(CRYPTO)
            out.append(None if e is None else e.response[:n])
        return fd, out, dev.digest()
    assert run() == run()
