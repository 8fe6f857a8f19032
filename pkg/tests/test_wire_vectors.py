"""Pinned byte vectors; WIRE.md carries the same hex blocks."""
from psiwca.dpf import DomainPoint, DpfKey, dpf_gen
from psiwca.group import Group
from psiwca.service import MsgType, WireFrame, decode_upload, encode_upload

KEY_VECTOR = (
    "d501800401000001000000000000eed89061c4f24dee5c6ee06f514ab9d9aee6d0537459"
    "15b25bf59ca0b4da6e4300ea1b7bd403c8c13c886cf9a0b9c29dbc0188f2e7dc0ece2f9d"
    "c77ccde81099929602fc6bbe3b5681e89c1e00cefb89e9314300aa24000000000000"
)
HEALTH_VECTOR = "505743410130aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa0000000000000000"
UPLOAD_VECTOR = (
    "010101010101010101010101010101010200000002103412efbee942112b096b3ddb533b"
    "ef57ef771e4490940db1805aa26cba9f2709f19b9da1"
)


def test_key_vector_pinned():
    g = Group((1 << 16,))
    k0, _ = dpf_gen(DomainPoint(0x9, 4), g.element(7), b"wire-doc-example")
    assert k0.to_bytes().hex() == KEY_VECTOR
    back = DpfKey.from_bytes(bytes.fromhex(KEY_VECTOR))
    assert back.domain_bits == 4 and back.party == 0
    assert back.group.moduli == (1 << 16,)


def test_health_frame_vector_pinned():
    frame = WireFrame(MsgType.HEALTH, b"\xaa" * 16, b"")
    assert frame.to_bytes().hex() == HEALTH_VECTOR
    assert WireFrame.from_bytes(bytes.fromhex(HEALTH_VECTOR)) == frame


def test_upload_vector_pinned():
    toks = [DomainPoint(0x1234, 16), DomainPoint(0xBEEF, 16)]
    payload = encode_upload(b"\x01" * 16, toks, b"\x33" * 32)
    assert payload.hex() == UPLOAD_VECTOR
    upload_id, back = decode_upload(bytes.fromhex(UPLOAD_VECTOR), b"\x33" * 32)
    assert upload_id == b"\x01" * 16
    assert [t.value for t in back] == [0x1234, 0xBEEF]
