import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from promptseg.cli import main
from promptseg.fusion import FusionCheckpoint, fusion_config_hash, init_fusion, save_checkpoint
from promptseg.optim import AdamWState
from promptseg.service import build_state, create_app
from promptseg.service.render import PALETTE, palette_rgb
from promptseg.volio import load_labelmap


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated data + a (briefly) trained checkpoint, via the CLI itself."""
    root = tmp_path_factory.mktemp("cliwork")
    data = str(root / "data")
    corpus = str(root / "corpus.tsv")
    ckpt = str(root / "fusion.ckpt")
    assert main(["gen-data", "--out", data, "--count", "2", "--seed", "3",
                 "--dims", "24,24,24"]) == 0
    assert main(["gen-prompts", "--data", data, "--out", corpus,
                 "--n-train", "16", "--n-val", "4", "--seed", "1"]) == 0
    assert main(["train-fusion", "--data", data, "--corpus", corpus,
                 "--out", ckpt, "--epochs", "1", "--iters", "8",
                 "--patch", "16,16,16", "--seed", "2"]) == 0
    return {"data": data, "corpus": corpus, "ckpt": ckpt, "root": str(root)}


class TestCli:
    def test_infer_happy_path(self, workdir):
        out = os.path.join(workdir["root"], "mask.vol")
        code = main([
            "infer", "--logits", os.path.join(workdir["data"], "vol_000_logits.vol"),
            "--prompt", "segment the liver", "--fusion", workdir["ckpt"],
            "--out", out,
        ])
        assert code == 0
        mask = load_labelmap(out)
        assert mask.dims == (24, 24, 24)

    def test_unknown_flag_exits_one(self, workdir, capsys):
        assert main(["infer", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand_exits_one(self):
        assert main([]) == 1

    def test_runtime_error_exits_two(self, workdir):
        code = main([
            "infer", "--logits", "/definitely/not/there.vol",
            "--prompt", "x", "--fusion", workdir["ckpt"], "--out", "/tmp/x.vol",
        ])
        assert code == 2

    def test_eval_self_comparison_all_ones(self, workdir, capsys):
        labels = os.path.join(workdir["data"], "vol_000_labels.vol")
        assert main(["eval", "--pred", labels, "--gt", labels, "--format", "kv"]) == 0
        out = capsys.readouterr().out
        assert "average.dsc=1.0" in out

    def test_parse_prompt_json(self, workdir, capsys):
        assert main(["parse-prompt", "--prompt",
                     "segment the liver and spleenic organ"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["mentioned"] == {"1": "spleen", "6": "liver"}

    def test_windowed_infer(self, workdir):
        out = os.path.join(workdir["root"], "mask_w.vol")
        code = main([
            "infer", "--labels", os.path.join(workdir["data"], "vol_000_labels.vol"),
            "--prompt", "segment the liver", "--fusion", workdir["ckpt"],
            "--window", "16,16,16", "--out", out, "--seed", "9",
        ])
        assert code == 0
        assert load_labelmap(out).dims == (24, 24, 24)

    def test_finetune_rh(self, workdir):
        out = os.path.join(workdir["root"], "refine.ckpt")
        code = main([
            "finetune-rh", "--data", workdir["data"], "--out", out,
            "--epochs", "2", "--cycles", "2", "--patch", "12,12,12",
            "--patches-per-volume", "1", "--seed", "0",
        ])
        assert code == 0
        assert os.path.exists(out)


@pytest.fixture(scope="module")
def client(workdir):
    state = build_state(workdir["ckpt"], data_dir=workdir["data"])
    return TestClient(create_app(state)), state


class TestService:
    def test_parse_endpoint_paper_prompt(self, client):
        c, _ = client
        r = c.post("/api/parse", json={"prompt": "segment the liver and spleenic organ"})
        assert r.status_code == 200
        body = r.json()
        assert {m["name"] for m in body["mentioned"]} == {"liver", "spleen"}
        assert body["presence"][1] == 1 and body["presence"][6] == 1
        assert not body["fallback_visual_only"]

    def test_model_endpoint(self, client):
        c, state = client
        r = c.get("/api/model")
        assert r.status_code == 200
        body = r.json()
        assert len(body["classes"]) == 13
        assert body["alpha"] == pytest.approx(state.fusion.alpha)
        assert body["palette"]["1"] == "#e6194b"

    def test_volumes_listing(self, client):
        c, _ = client
        r = c.get("/api/volumes")
        assert r.status_code == 200
        ids = [v["id"] for v in r.json()]
        assert ids == ["vol_000", "vol_001"]
        assert r.json()[0]["dims"] == [24, 24, 24]

    def test_slice_out_of_range_404(self, client):
        c, _ = client
        assert c.get("/api/volumes/vol_000/slice?axis=axial&index=99").status_code == 404
        assert c.get("/api/volumes/nope/slice?axis=axial&index=0").status_code == 404
        assert c.get("/api/volumes/vol_000/slice?axis=diagonal&index=0").status_code == 400

    def test_segment_identical_requests_byte_identical(self, client):
        c, _ = client
        req = {"volume_id": "vol_000", "prompt": "segment the liver"}
        a = c.post("/api/segment", json=req)
        b = c.post("/api/segment", json=req)
        assert a.status_code == 200
        assert a.content == b.content

    def test_segment_matches_cli_infer(self, client, workdir):
        c, _ = client
        r = c.post("/api/segment", json={"volume_id": "vol_001", "prompt": "segment the spleen"})
        counts_api = {int(k): v for k, v in r.json()["voxel_counts"].items()}
        out = os.path.join(workdir["root"], "mask_cmp.vol")
        main([
            "infer", "--logits", os.path.join(workdir["data"], "vol_001_logits.vol"),
            "--prompt", "segment the spleen", "--fusion", workdir["ckpt"], "--out", out,
        ])
        mask = load_labelmap(out)
        ids, counts = np.unique(mask.data, return_counts=True)
        assert counts_api == {int(i): int(n) for i, n in zip(ids, counts)}
        # byte-level identity, not just counts
        raw = c.get(f"/api/masks/{r.json()['mask_id']}/file")
        assert raw.content == mask.data.astype(np.uint8).tobytes(order="C")

    def test_zero_organ_restrict_422(self, client):
        c, _ = client
        r = c.post("/api/segment", json={"volume_id": "vol_000", "prompt": "hello", "restrict": True})
        assert r.status_code == 422
        r = c.post("/api/segment", json={"volume_id": "vol_000", "prompt": "hello"})
        assert r.status_code == 200
        assert r.json()["fallback_visual_only"]

    def test_unknown_volume_404(self, client):
        c, _ = client
        r = c.post("/api/segment", json={"volume_id": "ghost", "prompt": "segment the liver"})
        assert r.status_code == 404

    def test_malformed_body_400(self, client):
        c, _ = client
        r = c.post("/api/segment", json={"prompt": 5})  # missing volume_id, bad type
        assert r.status_code == 400
        r = c.post(
            "/api/parse",
            content=b"{not json",
            headers={"Content-Type": "application/json"},
        )
        assert r.status_code == 400

    def test_mask_slice_uses_palette(self, client):
        import io

        from PIL import Image

        c, state = client
        r = c.post("/api/segment", json={"volume_id": "vol_000", "prompt": "segment the liver"})
        mask_id = r.json()["mask_id"]
        mask = state.masks[mask_id]
        zs, _, _ = np.nonzero(mask.data == 6)
        assert len(zs), "liver voxels expected in the mask"
        z = int(zs[0])
        img = Image.open(io.BytesIO(
            c.get(f"/api/masks/{mask_id}/slice?axis=axial&index={z}").content
        ))
        rgba = np.array(img)
        plane = mask.data[z]
        liver_px = rgba[plane == 6]
        assert np.all(liver_px == np.array(list(palette_rgb(6)) + [255]))
        bg_px = rgba[plane == 0]
        assert np.all(bg_px[:, 3] == 0)  # background transparent

    def test_mask_raw_file(self, client):
        c, state = client
        r = c.post("/api/segment", json={"volume_id": "vol_000", "prompt": "segment the liver"})
        mask_id = r.json()["mask_id"]
        raw = c.get(f"/api/masks/{mask_id}/file")
        assert raw.status_code == 200
        dims = tuple(int(v) for v in raw.headers["x-dims"].split(","))
        data = np.frombuffer(raw.content, dtype=np.uint8).reshape(dims)
        assert np.array_equal(data, state.masks[mask_id].data)

    def test_palette_is_complete(self):
        assert sorted(PALETTE) == list(range(1, 14))
        for cid in PALETTE:
            rgb = palette_rgb(cid)
            assert len(rgb) == 3 and all(0 <= v <= 255 for v in rgb)
