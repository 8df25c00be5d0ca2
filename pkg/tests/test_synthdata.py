import http.server
import json
import logging
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfalab.errors import DatasetParseError, InfeasibleConfigError, ParameterError, VocabularyError
from cfalab.metrics import balanced_accuracy
from cfalab.synthdata import (
    EOS,
    SEXES,
    SITES,
    SPLITS,
    DataConfig,
    ExpansionProvider,
    Meta,
    class_counts,
    dataset_digest,
    detokenize,
    expand_metadata,
    generate_dataset,
    load_dataset,
    make_prototypes,
    nearest_prototype_predict,
    save_dataset,
    serialize_metadata,
    split_records,
    tokenize,
)


@pytest.fixture(scope="module")
def default_data():
    return generate_dataset(DataConfig())


# -- class priors ----------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 3000))
def test_balanced_limit(c, extra):
    counts = class_counts(c + extra, c, 1.0)
    assert counts.sum() == c + extra
    assert counts.max() - counts.min() <= 1


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 3000), st.floats(1.0, 200.0))
def test_counts_sum_and_decay(c, extra, rho):
    counts = class_counts(c + extra, c, rho)
    assert counts.sum() == c + extra
    assert counts.min() >= 1
    assert np.all(np.diff(counts) <= 1)  # non-increasing up to rounding


def test_long_tail_ratio_on_generated_output(default_data):
    labels = [r.class_id for r in default_data if r.split != "ood"]
    counts = np.bincount(labels, minlength=8)
    assert counts.sum() == 2000
    assert 45 <= counts.max() / counts.min() <= 55


def test_infeasible_config():
    with pytest.raises(InfeasibleConfigError):
        generate_dataset(DataConfig(n_total=5, n_classes=8))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_classes": 1},
        {"imbalance_rho": 0.5},
        {"d_v": 0},
        {"noise_sigma": -1.0},
        {"vocab_size": 20},
        {"desc_len": 3, "signature_len": 3},
        {"n_lesion_patches": 9},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        DataConfig(**kwargs)


# -- records ---------------------------------------------------------------------------


def test_determinism(tmp_path):
    cfg = DataConfig(n_total=300, n_ood=50, seed=7)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    save_dataset(a, tmp_path / "a.jsonl")
    save_dataset(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert dataset_digest(a) == dataset_digest(b)
    assert dataset_digest(generate_dataset(DataConfig(n_total=300, n_ood=50, seed=8))) != dataset_digest(a)


def test_record_invariants(default_data):
    cfg = DataConfig()
    ids = set()
    for r in default_data:
        assert 0 <= r.class_id < cfg.n_classes
        assert r.patch_features.shape == (cfg.n_patches, cfg.d_v)
        assert np.all(np.isfinite(r.patch_features))
        assert len(r.description_tokens) == cfg.desc_len
        assert all(0 <= t < cfg.vocab_size for t in r.description_tokens)
        assert r.description_tokens[: cfg.signature_len] == cfg.signature(r.class_id)
        assert r.description_tokens[-1] == EOS
        assert r.split in SPLITS
        assert r.meta.site in SITES and r.meta.sex in SEXES
        ids.add(r.id)
    assert len(ids) == len(default_data)


def test_signatures_are_a_bijection():
    cfg = DataConfig()
    sigs = [tuple(cfg.signature(c)) for c in range(cfg.n_classes)]
    assert len(set(sigs)) == cfg.n_classes
    lo, _ = cfg.filler_range
    assert max(max(s) for s in sigs) < lo


def test_every_class_in_every_split(default_data):
    for split in SPLITS:
        assert set(r.class_id for r in split_records(default_data, split)) == set(range(8))


def test_ood_prototypes_are_rotated():
    cfg = DataConfig()
    protos = make_prototypes(cfg)
    rot = protos.rotation
    np.testing.assert_allclose(rot @ rot.T, np.eye(cfg.d_v), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    np.testing.assert_allclose(protos.pattern(3, ood=True), protos.pattern(3) @ rot.T)
    assert not np.allclose(rot, np.eye(cfg.d_v))


def test_separability_knob():
    baccs = []
    for sigma in (0.0, 0.5, 1.0, 2.0):
        cfg = DataConfig(noise_sigma=sigma)
        data = generate_dataset(cfg)
        protos = make_prototypes(cfg)
        per_split = []
        for split in SPLITS:
            recs = split_records(data, split)
            preds = nearest_prototype_predict(recs, protos)
            per_split.append(balanced_accuracy(preds, [r.class_id for r in recs], cfg.n_classes))
        if sigma == 0.0:
            assert per_split == [1.0] * len(SPLITS)
        baccs.append(float(np.mean(per_split)))
    for prev, nxt in zip(baccs, baccs[1:]):
        assert nxt <= prev + 0.02
    assert baccs[-1] < baccs[0]


# -- metadata text -----------------------------------------------------------------------


def test_serialize_metadata_example():
    text, ids = serialize_metadata(Meta("posterior torso", 55, "male"))
    assert text == "A lesion on the posterior torso of a 55-year-old male patient."
    assert serialize_metadata(Meta("posterior torso", 55, "male"))[1] == ids
    assert detokenize(ids) == text


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(SITES), st.integers(0, 120), st.sampled_from(SEXES))
def test_tokenize_round_trip(site, age, sex):
    text, ids = serialize_metadata(Meta(site, age, sex))
    assert tokenize(text) == ids
    assert detokenize(tokenize(text)) == text


def test_unknown_site():
    with pytest.raises(VocabularyError):
        serialize_metadata(Meta("elbow", 40, "male"))
    with pytest.raises(VocabularyError):
        tokenize("A lesion on the moon")


# -- external expansion ------------------------------------------------------------------


class _Handler(http.server.BaseHTTPRequestHandler):
    reply = b""
    seen: list = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        type(self).seen.append(json.loads(body))
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        self.end_headers()
        self.wfile.write(type(self).reply)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_template_mode():
    meta = Meta("head/neck", 30, "female")
    assert expand_metadata(meta, ExpansionProvider()) == serialize_metadata(meta)[0]


def test_external_mode_returns_service_text(server):
    _Handler.reply = b"A pigmented lesion on the back of an adult man."
    _Handler.seen = []
    url = f"http://127.0.0.1:{server.server_address[1]}/expand"
    out = expand_metadata(Meta("posterior torso", 55, "male"), ExpansionProvider("external", url))
    assert out == "A pigmented lesion on the back of an adult man."
    assert _Handler.seen == [{"site": "posterior torso", "age": 55, "sex": "male"}]


def test_external_empty_body_falls_back(server, caplog):
    _Handler.reply = b""
    url = f"http://127.0.0.1:{server.server_address[1]}/expand"
    meta = Meta("palms/soles", 70, "female")
    with caplog.at_level(logging.WARNING):
        assert expand_metadata(meta, ExpansionProvider("external", url)) == serialize_metadata(meta)[0]
    assert "empty" in caplog.text


def test_external_unreachable_falls_back(caplog):
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    port = srv.server_address[1]
    srv.server_close()  # nothing listens on this port any more
    meta = Meta("upper extremity", 25, "male")
    with caplog.at_level(logging.WARNING):
        out = expand_metadata(meta, ExpansionProvider("external", f"http://127.0.0.1:{port}/", timeout=1.0))
    assert out == serialize_metadata(meta)[0]
    assert "failed" in caplog.text


# -- JSON Lines --------------------------------------------------------------------------


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_dataset(tmp_path / "e.jsonl") == []


def test_round_trip_2000_records(tmp_path, default_data):
    records = [r for r in default_data if r.split != "ood"]
    assert len(records) == 2000
    path = tmp_path / "d.jsonl"
    save_dataset(records, path)
    loaded = load_dataset(path)
    assert loaded == records
    save_dataset(loaded, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_floats_written_with_17_significant_digits(tmp_path):
    rec = generate_dataset(DataConfig(n_total=8, n_ood=0))[0]
    rec.patch_features[0, 0] = 0.1
    rec.patch_features[0, 1] = 3.0
    save_dataset([rec], tmp_path / "one.jsonl")
    line = (tmp_path / "one.jsonl").read_text()
    assert "0.10000000000000001" in line and "3.0," in line
    assert load_dataset(tmp_path / "one.jsonl")[0] == rec


@pytest.mark.parametrize(
    "bad",
    ["{not json", '{"id": "x"}', '{"id": "x", "class_id": 0, "patch_features": [[1.0]], '
     '"meta": {"site": "head/neck", "age": 3, "sex": "male"}, "description_tokens": [1], "split": "holdout"}'],
)
def test_malformed_line_reports_line_number(tmp_path, bad):
    good = generate_dataset(DataConfig(n_total=8, n_ood=0))[:2]
    path = tmp_path / "bad.jsonl"
    save_dataset(good, path)
    with path.open("a") as fh:
        fh.write("\n" + bad + "\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line_no == 4
