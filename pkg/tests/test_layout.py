import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conceptsplat.layout import (Bbox3D, FallbackController, FixtureController, LayoutError, LayoutPlan,
                                 LLMController, bbox_transform, fallback_layout, generate_layout,
                                 layout_request, make_controller, parse_layout_response, plan_from_dict,
                                 request_key, validate_layout)
from conceptsplat.scene import load_scene, parse_scene_spec

from conftest import SCENES


def _scene(k, bounds=(1.0, 1.0, 1.0)):
    body = "".join(f"  - id: {i}\n    concept_prompt: c{i}\n" for i in range(k))
    w, d, h = bounds
    return parse_scene_spec(f"version: 1\nglobal_prompt: x\nbounds: {{w: {w}, d: {d}, h: {h}}}\n"
                            f"concepts:\n{body}")


def _box_text(*boxes):
    return json.dumps({"boxes": [{"concept_id": i, "bbox": b} for i, b in enumerate(boxes)]})


# --------------------------------------------------------------------------- fallback

def test_fallback_single():
    plan = fallback_layout(_scene(1))
    assert plan.provenance == "fallback"
    assert plan.boxes[0].as_list() == [0.25, 0.25, 0.0, 0.5, 0.5, 0.5]


def test_fallback_two():
    b0, b1 = fallback_layout(_scene(2)).boxes
    assert b0.X == pytest.approx(0.025) and b1.X == pytest.approx(0.525)
    assert b0.W == pytest.approx(0.45) and b1.W == pytest.approx(0.45)
    assert b0.Y == 0.25 and b0.D == 0.5 and b0.H == 0.5


@pytest.mark.parametrize("k", range(1, 9))
def test_fallback_empty_report(k):
    s = _scene(k)
    assert not validate_layout(fallback_layout(s), s.global_bounds, k)
    s = _scene(k, (2.0, 1.0, 1.5))
    rep = validate_layout(fallback_layout(s), s.global_bounds, k)
    assert rep.valid and not any("overlap" in w for w in rep.warnings)


def test_fallback_deterministic():
    assert fallback_layout(_scene(3)).boxes == fallback_layout(_scene(3)).boxes


# --------------------------------------------------------------------------- placement transform

def test_bbox_transform_examples():
    tr = bbox_transform(Bbox3D(0.2, 0.2, 0.0, 0.4, 0.4, 0.6, 0), (1, 1, 1))
    assert tr.scale == pytest.approx(0.4) and np.allclose(tr.translation, [0.4, 0.4, 0.3])
    tr = bbox_transform(Bbox3D(0.0, 0.0, 0.0, 0.6, 0.2, 0.3, 0), (1, 1, 1))  # height binds
    assert tr.scale == pytest.approx(0.3) and np.allclose(tr.translation, [0.3, 0.1, 0.15])
    tr = bbox_transform(Bbox3D(0, 0, 0, 1, 1, 1, 0), (1, 1, 1))
    assert tr.scale == 1.0 and np.allclose(tr.translation, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.1, 10.0))
def test_bbox_transform_scale_equivariance(w, d, h, c):
    box = Bbox3D(0.1, 0.2, 0.0, w, d, h, 0)
    big = Bbox3D(0.1 * c, 0.2 * c, 0.0, w * c, d * c, h * c, 0)
    a, b = bbox_transform(box, (1, 1, 1)), bbox_transform(big, (c, c, c))
    assert b.scale == pytest.approx(a.scale, rel=1e-12)
    assert np.allclose(b.translation, c * a.translation, rtol=1e-12)


# --------------------------------------------------------------------------- validation

def test_validate_containment():
    plan = LayoutPlan([Bbox3D(0.0, 0.0, 0.0, 1.2, 0.5, 0.5, 0)], "llm")
    rep = validate_layout(plan, (1, 1, 1), 1)
    assert not rep.valid and "x-extent" in rep.errors[0]


def test_validate_overlap_warning():
    a = Bbox3D(0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0)
    b = Bbox3D(0.35, 0.0, 0.0, 0.5, 0.5, 0.5, 1)
    rep = validate_layout(LayoutPlan([a, b], "llm"), (1, 1, 1), 2)
    assert rep.valid and len(rep.warnings) == 1 and "30.0%" in rep.warnings[0]


def test_validate_ids():
    a = Bbox3D(0, 0, 0, 0.2, 0.2, 0.2, 0)
    rep = validate_layout(LayoutPlan([a, a, Bbox3D(0, 0, 0, 0.1, 0.1, 0.1, 5)], "llm"), (1, 1, 1), 2)
    text = " | ".join(rep.errors)
    assert "concept 0: 2 boxes" in text and "concept 1: no box" in text and "out of range" in text


def test_validate_depth_warning():
    rep = validate_layout(LayoutPlan([Bbox3D(0, 0, 0, 0.5, 0.1, 0.5, 0)], "llm"), (1, 1, 1), 1)
    assert rep.valid and "depth" in rep.warnings[0]


def test_validate_nonpositive():
    rep = validate_layout(LayoutPlan([Bbox3D(0, 0, 0, 0.5, 0.0, 0.5, 0)], "llm"), (1, 1, 1), 1)
    assert not rep.valid


# --------------------------------------------------------------------------- responses

def test_parse_response():
    plan = parse_layout_response(_box_text([0.1, 0.1, 0, 0.3, 0.3, 0.3]), "llm")
    assert plan.boxes[0] == Bbox3D(0.1, 0.1, 0.0, 0.3, 0.3, 0.3, 0) and plan.provenance == "llm"


@pytest.mark.parametrize("text", [
    "not json", "[]", '{"boxes": 3}', '{"boxes": [{"concept_id": 0}]}',
    '{"boxes": [{"concept_id": "a", "bbox": [0,0,0,1,1,1]}]}',
    '{"boxes": [{"concept_id": 0, "bbox": [0,0,0,1,1]}]}',
    '{"boxes": [{"concept_id": 0, "bbox": [0,0,0,1,true,1]}]}',
    '{"boxes": [{"concept_id": 0, "bbox": [0,0,0,-0.1,1,1]}]}',
    '{"boxes": [{"concept_id": 0, "bbox": [0,0,0,NaN,1,1]}]}',
])
def test_parse_response_rejects(text):
    with pytest.raises(LayoutError):
        parse_layout_response(text, "llm")


def test_request_key_stable():
    s = load_scene(SCENES / "two_concepts.yaml")
    req = layout_request(s)
    assert len(req["examples"]) == 3 and req["prompt"]["concepts"][1]["class_prompt"] == "a crate"
    assert request_key(req) == request_key(json.loads(json.dumps(req)))
    assert request_key(layout_request(_scene(2))) != request_key(req)


def test_fixture_replay():
    s = load_scene(SCENES / "two_concepts.yaml")
    plan = generate_layout(s, FixtureController())
    assert plan.provenance == "fixture"
    assert plan.box(0).as_list() == [0.05, 0.3, 0.0, 0.4, 0.4, 0.4]
    assert validate_layout(plan, s.global_bounds, 2).valid


def test_fixture_missing(tmp_path):
    with pytest.raises(LayoutError, match="no recorded layout"):
        generate_layout(_scene(2), FixtureController(tmp_path))
    plan = generate_layout(_scene(2), FixtureController(tmp_path), allow_fallback=True)
    assert plan.provenance == "fallback"


def test_schema_error_not_repaired(tmp_path):
    s = _scene(1)
    ctl = FixtureController(tmp_path)
    ctl.path_for(s).write_text(_box_text([0.1, 0.1, 0, -0.1, 0.3, 0.3]))
    with pytest.raises(LayoutError, match="non-positive"):
        generate_layout(s, ctl)


def test_repair_clamps(tmp_path):
    s = _scene(1)
    ctl = FixtureController(tmp_path)
    ctl.path_for(s).write_text(_box_text([0.8, -0.1, 0, 0.5, 0.3, 1.5]))
    plan = generate_layout(s, ctl)
    assert np.allclose(plan.boxes[0].as_list(), [0.5, 0.0, 0.0, 0.5, 0.3, 1.0])
    assert validate_layout(plan, s.global_bounds, 1).valid


def test_repair_cannot_fix_missing_box(tmp_path):
    s = _scene(2)
    ctl = FixtureController(tmp_path)
    ctl.path_for(s).write_text(_box_text([0.1, 0.1, 0, 0.3, 0.3, 0.3]))
    with pytest.raises(LayoutError, match="after repair"):
        generate_layout(s, ctl)


class _Handler(BaseHTTPRequestHandler):
    response = b""
    seen = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        _Handler.seen.append((json.loads(body), self.headers.get("Authorization")))
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(_Handler.response)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=httpd.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}/layout"
    httpd.shutdown()
    httpd.server_close()


def test_llm_round_trip_and_recording(server, tmp_path, monkeypatch):
    s = _scene(2)
    _Handler.response = _box_text([0.0, 0.2, 0, 0.4, 0.4, 0.4], [0.5, 0.2, 0, 0.4, 0.4, 0.4]).encode()
    _Handler.seen.clear()
    monkeypatch.setenv("CONCEPTSPLAT_LLM_KEY", "secret")
    plan = generate_layout(s, LLMController(server, record_to=tmp_path))
    assert plan.provenance == "llm" and plan.box(1).X == 0.5
    req, auth = _Handler.seen[0]
    assert req == json.loads(json.dumps(layout_request(s))) and auth == "Bearer secret"
    replay = generate_layout(s, FixtureController(tmp_path))
    assert [b.as_list() for b in replay.boxes] == [b.as_list() for b in plan.boxes]


def test_llm_transport_error():
    ctl = LLMController("http://127.0.0.1:9/unreachable", timeout=2.0)
    with pytest.raises(LayoutError, match="transport"):
        generate_layout(_scene(1), ctl)
    assert generate_layout(_scene(1), ctl, allow_fallback=True).provenance == "fallback"


def test_llm_unconfigured(monkeypatch):
    monkeypatch.delenv("CONCEPTSPLAT_LLM_URL", raising=False)
    with pytest.raises(LayoutError, match="CONCEPTSPLAT_LLM_URL"):
        LLMController().respond(_scene(1))


def test_make_controller():
    assert isinstance(make_controller("fallback"), FallbackController)
    assert isinstance(make_controller("fixture"), FixtureController)
    with pytest.raises(ValueError):
        make_controller("oracle")


def test_plan_json_round_trip():
    plan = fallback_layout(_scene(3))
    back = plan_from_dict(json.loads(plan.to_json()))
    assert back.boxes == plan.boxes and back.provenance == "fallback"
