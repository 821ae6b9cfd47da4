from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_embedding, random_minutiae, random_template, random_virtual, unit_rows
from latent_search.template import (
    EMBEDDING_BYTES,
    HEADER_SIZE,
    RECORD_SIZE,
    BadMagicError,
    FingerprintTemplate,
    MinutiaeTemplate,
    Modality,
    TemplateError,
    TemplateValidationError,
    TrailingDataError,
    TruncatedTemplateError,
    UnsupportedVersionError,
    VirtualMinutiaeTemplate,
    decode_template,
    encode_template,
    encoded_size,
    load_collection,
    save_collection,
    validate_template,
)


def test_record_layout_sizes():
    assert RECORD_SIZE == 13 + 96 * 4
    assert HEADER_SIZE == 4 + 2 + 2 + 2 + 1 + 2 + 2 + 2 + 4 + 4
    assert EMBEDDING_BYTES == 768 * 4


def test_round_trip_single():
    t = random_template(np.random.default_rng(0), m=12, n=20, tid="probe-1")
    assert decode_template(encode_template(t)) == t


def test_empty_template_size():
    t = random_template(np.random.default_rng(1), m=0, n=0, tid="abc")
    b = encode_template(t)
    assert len(b) == HEADER_SIZE + 3 + 768 * 4
    assert decode_template(b) == t


def test_latent_average_block_sizes():
    # typical latent: 45 minutiae and 363 virtual minutiae
    t = random_template(np.random.default_rng(2), m=45, n=363, tid="x")
    b = encode_template(t)
    start = HEADER_SIZE + 1
    assert len(b) - start - EMBEDDING_BYTES == 45 * (13 + 384) + 363 * (13 + 384)
    # records sit where the header says they do
    rec = np.frombuffer(b, dtype="<f4", count=1, offset=start)
    assert rec[0] == t.minutiae.points[0, 0]


@pytest.mark.parametrize("m,n,k", [(0, 0, 1), (3, 0, 5), (0, 7, 2), (10, 20, 30)])
def test_encoded_size_affine(m, n, k):
    t = random_template(np.random.default_rng(m * 100 + n), m=m, n=n, tid="i" * k)
    assert len(encode_template(t)) == encoded_size(m, n, k) == HEADER_SIZE + k + (m + n) * RECORD_SIZE + EMBEDDING_BYTES


def test_bad_magic():
    b = bytearray(encode_template(random_template(np.random.default_rng(3), tid="a")))
    b[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_template(bytes(b))


def test_unsupported_version():
    b = bytearray(encode_template(random_template(np.random.default_rng(3), tid="a")))
    b[4:6] = (2).to_bytes(2, "little")
    with pytest.raises(UnsupportedVersionError):
        decode_template(bytes(b))


def test_truncated_records():
    t = random_template(np.random.default_rng(4), m=10, n=0, tid="a")
    b = encode_template(t)
    cut = HEADER_SIZE + 1 + 5 * RECORD_SIZE
    with pytest.raises(TruncatedTemplateError):
        decode_template(b[:cut])


def test_trailing_bytes():
    b = encode_template(random_template(np.random.default_rng(5), tid="a"))
    with pytest.raises(TrailingDataError):
        decode_template(b + b"\0")


def test_errors_are_distinct():
    kinds = {BadMagicError, UnsupportedVersionError, TruncatedTemplateError, TemplateValidationError}
    assert len(kinds) == 4
    assert all(issubclass(k, TemplateError) for k in kinds)


def test_valid_template_has_empty_report():
    assert validate_template(random_template(np.random.default_rng(6), tid="ok")) == []


def test_descriptor_norm_violation():
    rng = np.random.default_rng(7)
    t = random_template(rng, m=3, n=0, tid="a")
    desc = t.minutiae.descriptors.copy()
    desc[1] *= 0.5
    bad = dataclasses.replace(t, minutiae=MinutiaeTemplate(t.minutiae.points, t.minutiae.kinds, desc))
    fields = [v.field for v in validate_template(bad)]
    assert fields == ["minutiae.descriptor_norm"]
    with pytest.raises(TemplateValidationError) as exc:
        encode_template(bad)
    assert "descriptor_norm" in str(exc.value)


def test_angle_range_violation():
    t = random_template(np.random.default_rng(8), m=2, n=0, tid="a")
    pts = t.minutiae.points.copy()
    pts[0, 2] = 7.0
    bad = dataclasses.replace(t, minutiae=MinutiaeTemplate(pts, t.minutiae.kinds, t.minutiae.descriptors))
    assert [v.field for v in validate_template(bad)] == ["minutiae.theta"]


def test_duplicate_minutiae_exact_only():
    rng = np.random.default_rng(9)
    t = random_template(rng, m=2, n=0, tid="a")
    pts = t.minutiae.points.copy()
    pts[1] = pts[0]
    dup = dataclasses.replace(t, minutiae=MinutiaeTemplate(pts, t.minutiae.kinds, t.minutiae.descriptors))
    assert [v.field for v in validate_template(dup)] == ["minutiae.duplicate"]
    pts[1, 0] = np.nextafter(pts[0, 0], np.float32(np.inf))
    near = dataclasses.replace(t, minutiae=MinutiaeTemplate(pts, t.minutiae.kinds, t.minutiae.descriptors))
    assert validate_template(near) == []


def test_virtual_off_grid_and_kind():
    rng = np.random.default_rng(10)
    t = random_template(rng, m=0, n=3, tid="a")
    pts = t.virtual.points.copy()
    pts[0, 0] += 1
    v = VirtualMinutiaeTemplate(pts, np.array([2, 2, 0]), t.virtual.descriptors)
    fields = {x.field for x in validate_template(dataclasses.replace(t, virtual=v))}
    assert fields == {"virtual.grid", "virtual.kind"}


def test_reports_every_violation():
    rng = np.random.default_rng(11)
    t = random_template(rng, m=2, n=0, tid="a")
    pts = t.minutiae.points.copy()
    pts[0, 2] = -1
    pts[1, 0] = -5
    desc = t.minutiae.descriptors * 2
    bad = dataclasses.replace(
        t, id="", ppi=0, minutiae=MinutiaeTemplate(pts, t.minutiae.kinds, desc)
    )
    fields = {v.field for v in validate_template(bad)}
    assert fields == {"id", "ppi", "minutiae.xy", "minutiae.theta", "minutiae.descriptor_norm"}


def test_flattened_dimension():
    t = random_minutiae(np.random.default_rng(12), 7)
    assert t.flattened().shape == (7, 99)
    assert random_virtual(np.random.default_rng(12), 5).flattened().shape == (5, 99)


def test_templates_are_immutable():
    t = random_minutiae(np.random.default_rng(13), 3)
    with pytest.raises(ValueError):
        t.points[0, 0] = 1.0


def test_collection_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    ts = [random_template(rng, tid=f"g{i}") for i in range(5)]
    save_collection(tmp_path, ts)
    back = load_collection(tmp_path)
    assert back == ts
    assert (tmp_path / "manifest.tsv").read_text().splitlines()[0].startswith("g0\ttemplates/")


@given(st.integers(0, 2**32 - 1), st.integers(0, 25), st.integers(0, 40), st.text(min_size=1, max_size=20))
def test_round_trip_property(seed, m, n, tid):
    t = random_template(np.random.default_rng(seed), m=m, n=n, tid=tid)
    b = encode_template(t)
    assert len(b) == encoded_size(m, n, len(tid.encode("utf-8")))
    assert decode_template(b) == t


@given(st.integers(0, 2**32 - 1), st.data())
def test_decode_fuzz_never_crashes(seed, data):
    b = bytearray(encode_template(random_template(np.random.default_rng(seed), m=4, n=3, tid="fz")))
    op = data.draw(st.sampled_from(["truncate", "flip", "extend"]))
    if op == "truncate":
        b = b[: data.draw(st.integers(0, len(b) - 1))]
    elif op == "flip":
        i = data.draw(st.integers(0, len(b) - 1))
        b[i] ^= data.draw(st.integers(1, 255))
    else:
        b += bytes(data.draw(st.integers(1, 64)))
    try:
        decode_template(bytes(b))
    except TemplateError:
        pass
