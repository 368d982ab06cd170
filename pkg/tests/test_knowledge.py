import json

import pytest
import torch

from distfsar.config import Config
from distfsar.encoders import StubDualEncoder
from distfsar.errors import (CountMismatchError, FingerprintMismatchError,
                             TransportError)
from distfsar.knowledge import (FixtureClient, KnowledgeBase, KnowledgeEntry,
                                build_spatial_prompt, build_temporal_prompt,
                                encode_entry, ensure_coverage,
                                generate_attributes, load_kb, new_kb,
                                parse_attribute_list, save_kb)

DRINK_SPATIAL = "container; mouth; hand; glass; table; liquid"
DRINK_TEMPORAL = "Hold container; Bring container to mouth; Put container"


# ---------------------------------------------------------------------------
# prompts

def test_spatial_prompt_matches_template():
    assert build_spatial_prompt("drink", 6) == (
        "Given action label {drink}, please generate {6} most related objects "
        "for each class.")


def test_temporal_prompt_matches_template():
    assert build_temporal_prompt("drink", 3) == (
        "Given action label {drink}, please describe {3} states of each "
        "action in simple and short words.")


def test_prompt_substitution():
    p = build_spatial_prompt("run", 1)
    assert "{run}" in p and "{1}" in p
    assert p.count("run") == 1
    q = build_temporal_prompt("kick ball", 3)
    assert "{kick ball}" in q


def test_prompts_differ_only_in_label_slot():
    a = build_temporal_prompt("walk", 3)
    b = build_temporal_prompt("jump", 3)
    assert a.replace("{walk}", "{X}") == b.replace("{jump}", "{X}")


def test_prompt_rejects_nonpositive_count():
    with pytest.raises(ValueError):
        build_spatial_prompt("drink", 0)


# ---------------------------------------------------------------------------
# parsing

def test_parse_semicolon_separated():
    items = parse_attribute_list(DRINK_SPATIAL, 6, dedupe=True)
    assert items[0] == "container"
    assert len(items) == 6


def test_parse_newline_and_numbering():
    text = "1. cup\n2) spoon\n- bowl\n3 : plate"
    assert parse_attribute_list(text, 4, dedupe=True) == \
        ["cup", "spoon", "bowl", "plate"]


def test_parse_dedupes_case_insensitively():
    with pytest.raises(CountMismatchError):
        parse_attribute_list("Cup; cup; bowl", 3, dedupe=True)
    assert parse_attribute_list("Cup; cup; bowl", 2, dedupe=True) == ["Cup", "bowl"]


def test_parse_keeps_temporal_duplicates():
    items = parse_attribute_list("hold; hold; release", 3, dedupe=False)
    assert items == ["hold", "hold", "release"]


# ---------------------------------------------------------------------------
# generation

def fixture_client():
    return FixtureClient({"drink": {"spatial": DRINK_SPATIAL,
                                    "temporal": DRINK_TEMPORAL}})


def test_generate_attributes_parses_fixture():
    entry = generate_attributes(fixture_client(), "drink", 6, 3, model_id="m")
    assert entry.spatial_attributes[0] == "container"
    assert entry.temporal_attributes == [
        "Hold container", "Bring container to mouth", "Put container"]
    assert entry.provenance["model_id"] == "m"
    assert entry.provenance["prompt_hash"]


def test_generate_attributes_count_mismatch_retries_then_fails():
    client = FixtureClient({"drink": {"spatial": "a; b; c; d; e",
                                      "temporal": DRINK_TEMPORAL}})
    with pytest.raises(CountMismatchError) as err:
        generate_attributes(client, "drink", 6, 3, max_retries=2)
    assert "a; b; c; d; e" in str(err.value)
    assert client.calls == 3  # initial attempt plus two retries


def test_generate_attributes_transport_error():
    with pytest.raises(TransportError):
        generate_attributes(FixtureClient({}), "drink", 6, 3)


# ---------------------------------------------------------------------------
# encoding

def test_encode_entry_shapes_and_rows():
    enc = StubDualEncoder(Config().encoder)
    entry = KnowledgeEntry("drink",
                           [f"object {i}" for i in range(6)],
                           [f"step {j}" for j in range(3)])
    feats = encode_entry(entry, enc)
    assert feats.spatial.shape == (6, 32)
    assert feats.temporal.shape == (3, 32)
    for i, attr in enumerate(entry.spatial_attributes):
        assert torch.equal(feats.spatial[i], enc.encode_text(attr).values)


def test_encode_entry_row_order_follows_attribute_order():
    enc = StubDualEncoder(Config().encoder)
    entry1 = KnowledgeEntry("a", ["x", "y"], ["s"])
    entry2 = KnowledgeEntry("a", ["y", "x"], ["s"])
    f1 = encode_entry(entry1, enc)
    f2 = encode_entry(entry2, enc)
    assert torch.equal(f1.spatial[0], f2.spatial[1])
    assert torch.equal(f1.spatial[1], f2.spatial[0])


# ---------------------------------------------------------------------------
# knowledge base persistence

def small_kb(cfg) -> KnowledgeBase:
    kb = new_kb(cfg)
    for i in range(5):
        kb.add(KnowledgeEntry(
            f"label-{i}",
            [f"obj {i}.{g}" for g in range(cfg.knowledge.num_spatial)],
            [f"step {i}.{l}" for l in range(cfg.knowledge.num_temporal)],
            provenance={"model_id": "t", "prompt_hash": "h", "timestamp": "now"}))
    return kb


def test_kb_round_trip(tmp_path):
    cfg = Config()
    kb = small_kb(cfg)
    path = tmp_path / "kb.json"
    save_kb(kb, path)
    loaded = load_kb(path, cfg.knowledge_fingerprint())
    assert loaded.fingerprint == kb.fingerprint
    assert set(loaded.entries) == set(kb.entries)
    for label, entry in kb.entries.items():
        other = loaded.entries[label]
        assert other.spatial_attributes == entry.spatial_attributes
        assert other.temporal_attributes == entry.temporal_attributes
        assert other.provenance == entry.provenance


def test_kb_fingerprint_mismatch(tmp_path):
    cfg = Config()
    kb = small_kb(cfg)
    path = tmp_path / "kb.json"
    save_kb(kb, path)
    other = Config()
    other.knowledge.num_temporal = 2
    with pytest.raises(FingerprintMismatchError):
        load_kb(path, other.knowledge_fingerprint())
    loaded = load_kb(path, other.knowledge_fingerprint(), allow_mismatch=True)
    assert len(loaded.entries) == 5


def test_kb_rejects_non_kb_file(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text(json.dumps({"something": 1}))
    with pytest.raises(ValueError):
        load_kb(path)


def test_ensure_coverage_skips_cached_labels():
    cfg = Config()
    responses = {f"label-{i}": {"spatial": "; ".join(f"o{i}.{g}" for g in range(6)),
                                "temporal": "; ".join(f"s{i}.{l}" for l in range(3))}
                 for i in range(4)}
    client = FixtureClient(responses)
    kb = new_kb(cfg)
    failures = ensure_coverage(kb, list(responses), client, cfg)
    assert not failures
    first_calls = client.calls
    assert first_calls == 8  # two prompts per label

    failures = ensure_coverage(kb, list(responses), client, cfg)
    assert not failures
    assert client.calls == first_calls  # cache hit: zero new client calls


def test_ensure_coverage_reports_partial_failures():
    cfg = Config()
    client = FixtureClient({"good": {
        "spatial": "a; b; c; d; e; f", "temporal": "x; y; z"}})
    kb = new_kb(cfg)
    failures = ensure_coverage(kb, ["good", "missing"], client, cfg)
    assert "good" in kb
    assert set(failures) == {"missing"}


# ---------------------------------------------------------------------------
# HTTP client (loopback server, no external network)

@pytest.fixture
def chat_server():
    import threading
    from http.server import BaseHTTPRequestHandler, HTTPServer

    state = {"requests": [], "fail_first": 0}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            state["requests"].append(
                (body, self.headers.get("Authorization", "")))
            if state["fail_first"] > 0:
                state["fail_first"] -= 1
                self.send_response(500)
                self.end_headers()
                return
            prompt = body["messages"][0]["content"]
            reply = DRINK_SPATIAL if "objects" in prompt else DRINK_TEMPORAL
            payload = json.dumps(
                {"choices": [{"message": {"content": reply}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", state
    server.shutdown()
    thread.join(timeout=5)


def test_http_client_round_trip(chat_server):
    from distfsar.knowledge import HttpChatClient
    url, state = chat_server
    client = HttpChatClient(base_url=url, model_id="test-model", api_key="sk-x")
    entry = generate_attributes(client, "drink", 6, 3, model_id="test-model")
    assert entry.spatial_attributes[0] == "container"
    body, auth = state["requests"][0]
    assert body["model"] == "test-model"
    assert auth == "Bearer sk-x"


def test_http_client_retries_then_succeeds(chat_server):
    from distfsar.knowledge import HttpChatClient
    url, state = chat_server
    state["fail_first"] = 1
    client = HttpChatClient(base_url=url, max_retries=2, backoff_seconds=0.01)
    text = client.complete("drink", "spatial", "objects please")
    assert text == DRINK_SPATIAL
    assert len(state["requests"]) == 2


def test_http_client_transport_error_after_retries(chat_server):
    from distfsar.knowledge import HttpChatClient
    url, state = chat_server
    state["fail_first"] = 10
    client = HttpChatClient(base_url=url, max_retries=1, backoff_seconds=0.01)
    with pytest.raises(TransportError):
        client.complete("drink", "spatial", "objects please")


def test_http_client_reads_environment(monkeypatch):
    from distfsar import knowledge as kn
    monkeypatch.setenv(kn.ENV_URL, "http://example.invalid/v1/chat")
    monkeypatch.setenv(kn.ENV_MODEL, "env-model")
    monkeypatch.setenv(kn.ENV_KEY, "env-key")
    client = kn.HttpChatClient()
    assert client.base_url == "http://example.invalid/v1/chat"
    assert client.model_id == "env-model"
    assert client.api_key == "env-key"
    monkeypatch.delenv(kn.ENV_URL)
    with pytest.raises(TransportError, match="DIST_LLM_URL"):
        kn.HttpChatClient()
