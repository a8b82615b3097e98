"""HTTP session service for human-in-the-loop annotation.

Volumes stay on the server; slices (PNG), meshes (OBJ) and small JSON
payloads are the wire currency. Every label mutation goes through a
per-session writer lock and the bounded undo stack, so concurrent readers
always see a consistent snapshot and N edits followed by N undos restore
the opening state exactly. One edit token per session enforces a single
writer; reads need no token.

Edit objects (POST /s/{id}/edit):
  {"type": "cage",  "region", "frame", "node", "delta_mm": [dx,dy,dz]}
  {"type": "grow",  "region", "frame", "seeds": [[x,y,z]...],
                    "hu_range": [lo,hi], "connectivity"?, "max_voxels"?}
  {"type": "track", "region", "template_frame", "to_frame"?}
  {"type": "paint"|"erase", "region", "frame", "runs": [[x,y,z,len]...]}
  {"type": "undo"}

A growth leak (cap exceeded) is reported as a warning state and leaves the
labels untouched.
"""

from __future__ import annotations

import io
import json
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, Header, HTTPException, Response
from PIL import Image

from .errors import GrowthCapError, SwctError
from .evalkit import dice_report
from .meshviz import REGION_COLORS, marching_cubes
from .segkit.ffd import Cage, cage_bind, cage_deform
from .segkit.grow import GrowParams, region_grow
from .segkit.mesh import obj_text, voxelize
from .segkit.rigid import track_rigid
from .volcore import (Frame, LabelMap, REGION_NAMES, Sequence4D,
                      binary_labelmap, load_case, save_labels)

DEFAULT_WINDOW = (40.0, 400.0)  # center, width: soft-tissue display default
UNDO_DEPTH = 64
_AXES = {"axial": 2, "coronal": 1, "sagittal": 0}


@dataclass
class _CageState:
    cage: Cage
    binding: object | None = None
    baseline_mask: np.ndarray | None = None


@dataclass
class Session:
    session_id: str
    case_dir: Path
    seq: Sequence4D                      # volumes (labels unused after copy)
    labels: list[np.ndarray]             # working uint8 arrays, mutable
    cages: dict = field(default_factory=dict)   # (frame, region) -> _CageState
    undo: list = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock)
    edit_token: str = field(default_factory=lambda: secrets.token_hex(8))
    dirty: bool = False

    @property
    def geom(self):
        return self.seq.frames[0].volume

    def snapshot(self, frame: int) -> np.ndarray:
        return self.labels[frame].copy()

    def record_undo(self, label_diffs, cage_changes):
        self.undo.append({"labels": label_diffs, "cages": cage_changes})
        if len(self.undo) > UNDO_DEPTH:
            self.undo.pop(0)

    def diff_against(self, frame: int, before: np.ndarray):
        after = self.labels[frame]
        changed = before != after
        idx = np.flatnonzero(changed.ravel())
        return (frame, idx, before.ravel()[idx]) if idx.size else None


def _clamp_or_404(value: int, n: int, what: str) -> int:
    if not 0 <= value < n:
        raise HTTPException(404, f"{what} {value} out of range 0..{n - 1}")
    return value


def create_app(data_dir, ui_dir=None) -> FastAPI:
    data_dir = Path(data_dir).resolve()
    app = FastAPI(title="swct annotation service")
    app.state.sessions = {}
    app.state.counter = 0
    app.state.lock = threading.Lock()

    def get_session(sid: str) -> Session:
        s = app.state.sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"no session '{sid}'")
        return s

    def check_token(s: Session, token: str | None):
        if token != s.edit_token:
            raise HTTPException(409, "missing or stale edit token "
                                     "(one writer per session)")

    def resolve_case(rel: str) -> Path:
        p = (data_dir / rel).resolve()
        if data_dir not in p.parents and p != data_dir:
            raise HTTPException(400, "case path escapes the data directory")
        return p

    @app.get("/")
    def root():
        return {"service": "swct annotd", "sessions": len(app.state.sessions),
                "ui": "/ui/" if ui_dir else None}

    @app.get("/sessions")
    def list_sessions():
        return [{"session_id": s.session_id, "case_id": s.seq.case_id,
                 "case_dir": str(s.case_dir), "dirty": s.dirty,
                 "n_frames": len(s.seq)}
                for s in app.state.sessions.values()]

    @app.post("/sessions")
    def open_session(body: dict = Body(...)):
        case = body.get("case")
        if not case:
            raise HTTPException(400, "body must contain {'case': <dir>}")
        case_dir = resolve_case(str(case))
        if not (case_dir / "case.json").exists():
            raise HTTPException(404, f"no case manifest under {case}")
        try:
            seq = load_case(case_dir)
        except SwctError as e:
            raise HTTPException(422, f"invalid case: {e}") from e
        labels = []
        for fr in seq.frames:
            if fr.labels is not None:
                labels.append(fr.labels.codes.copy())
            else:
                labels.append(np.zeros(fr.volume.dims, dtype=np.uint8))
        with app.state.lock:
            app.state.counter += 1
            sid = f"s{app.state.counter}"
        session = Session(sid, case_dir, seq, labels)
        cages_path = case_dir / "cages.json"
        if cages_path.exists():
            for item in json.loads(cages_path.read_text()):
                key = (int(item["frame"]), int(item["region"]))
                session.cages[key] = _CageState(Cage.from_dict(item["cage"]))
        app.state.sessions[sid] = session
        return {"session_id": sid, "edit_token": session.edit_token,
                "n_frames": len(seq), "case_id": seq.case_id}

    @app.get("/s/{sid}/meta")
    def meta(sid: str):
        s = get_session(sid)
        g = s.geom
        return {"session_id": sid, "case_id": s.seq.case_id,
                "n_frames": len(s.seq), "dims": list(g.dims),
                "spacing_mm": list(g.spacing), "origin_mm": list(g.origin),
                "frame_interval_s": s.seq.frame_interval_s,
                "regions": {str(k): v for k, v in sorted(REGION_NAMES.items())},
                "colors": {str(k): list(v) for k, v in sorted(REGION_COLORS.items())},
                "window_default": {"wc": DEFAULT_WINDOW[0], "ww": DEFAULT_WINDOW[1]},
                "undo_depth": len(s.undo), "dirty": s.dirty}

    def slice2d(arr: np.ndarray, axis_name: str, index: int) -> np.ndarray:
        axis = _AXES.get(axis_name)
        if axis is None:
            raise HTTPException(400, f"axis must be one of {sorted(_AXES)}")
        _clamp_or_404(index, arr.shape[axis], f"{axis_name} index")
        if axis == 2:
            return arr[:, :, index].T    # rows y, cols x
        if axis == 1:
            return arr[:, index, :].T    # rows z, cols x
        return arr[index, :, :].T        # rows z, cols y

    def png_response(img: Image.Image) -> Response:
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    @app.get("/s/{sid}/slice")
    def ct_slice(sid: str, frame: int, axis: str = "axial", index: int = 0,
                 wc: float = DEFAULT_WINDOW[0], ww: float = DEFAULT_WINDOW[1]):
        s = get_session(sid)
        _clamp_or_404(frame, len(s.seq), "frame")
        if ww <= 0:
            raise HTTPException(400, "window width must be positive")
        with s.lock:
            plane = slice2d(s.seq.frames[frame].volume.voxels, axis, index).copy()
        lo = wc - ww / 2.0
        gray = np.clip((plane.astype(np.float64) - lo) / ww * 255.0, 0, 255)
        return png_response(Image.fromarray(gray.astype(np.uint8), "L"))

    @app.get("/s/{sid}/labels/slice")
    def label_slice(sid: str, frame: int, axis: str = "axial", index: int = 0):
        s = get_session(sid)
        _clamp_or_404(frame, len(s.seq), "frame")
        with s.lock:
            plane = slice2d(s.labels[frame], axis, index).copy()
        img = Image.fromarray(plane, "P")
        palette = []
        for code in range(256):
            palette.extend(REGION_COLORS.get(code, (0, 0, 0)))
        img.putpalette(palette)
        buf = io.BytesIO()
        img.save(buf, format="PNG", transparency=0)
        return Response(buf.getvalue(), media_type="image/png")

    # ------------------------------------------------------------------ edits

    def init_cage_state(s: Session, frame: int, region: int,
                        cage: Cage | None = None) -> _CageState:
        mask = s.labels[frame] == region
        if not mask.any():
            raise HTTPException(422, f"region {region} empty at frame {frame}; "
                                     "nothing to bind a cage to")
        mesh = marching_cubes(mask, s.geom)
        if mesh.is_empty:
            raise HTTPException(422, "could not extract a surface to bind")
        if cage is None:
            lo = mesh.vertices.min(axis=0) - 2.0
            hi = mesh.vertices.max(axis=0) + 2.0
            cage = Cage.regular(lo, hi, (4, 4, 4))
        try:
            binding = cage_bind(mesh, cage.with_displaced(cage.rest))
        except SwctError as e:
            raise HTTPException(422, str(e)) from e
        return _CageState(cage, binding, mask.copy())

    def region_mask_update(s: Session, frame: int, region: int,
                           new_mask: np.ndarray):
        lab = s.labels[frame]
        lab[(lab == region) & ~new_mask] = 0
        lab[new_mask] = region

    def apply_cage_edit(s: Session, body: dict) -> dict:
        frame = _clamp_or_404(int(body["frame"]), len(s.seq), "frame")
        region = int(body["region"])
        delta = np.asarray(body.get("delta_mm", (0, 0, 0)), dtype=float)
        key = (frame, region)
        state = s.cages.get(key)
        old_cage = state.cage if state else None
        if state is None or state.binding is None:
            state = init_cage_state(s, frame, region,
                                    state.cage if state else None)
            s.cages[key] = state
        node = int(body["node"])
        n_nodes = len(state.cage.rest)
        if not 0 <= node < n_nodes:
            raise HTTPException(422, f"cage node {node} out of range 0..{n_nodes - 1}")
        displaced = state.cage.displaced.copy()
        displaced[node] += delta
        new_cage = state.cage.with_displaced(displaced)

        before = s.snapshot(frame)
        if np.array_equal(displaced, state.cage.rest):
            new_mask = state.baseline_mask
        else:
            mesh = cage_deform(state.binding, new_cage)
            try:
                new_mask = voxelize(mesh, s.geom).as_bool()
            except SwctError as e:
                raise HTTPException(422, f"deformed mesh not voxelizable: {e}") from e
        region_mask_update(s, frame, region, new_mask)
        diff = s.diff_against(frame, before)
        s.record_undo([diff] if diff else [],
                      [(key, _CageState(old_cage) if old_cage else None)])
        state.cage = new_cage
        return {"applied": True, "frames": [frame],
                "changed_voxels": int(diff[1].size) if diff else 0}

    def apply_grow_edit(s: Session, body: dict) -> dict:
        frame = _clamp_or_404(int(body["frame"]), len(s.seq), "frame")
        region = int(body["region"])
        try:
            params = GrowParams(
                tuple(tuple(int(c) for c in seed) for seed in body["seeds"]),
                tuple(body["hu_range"]),
                connectivity=int(body.get("connectivity", 6)),
                max_voxels=int(body.get("max_voxels", 2_000_000)))
            grown = region_grow(s.seq.frames[frame].volume, params)
        except GrowthCapError as e:
            return {"applied": False, "warning": str(e), "changed_voxels": 0,
                    "frames": [frame]}
        except SwctError as e:
            raise HTTPException(422, str(e)) from e
        before = s.snapshot(frame)
        s.labels[frame][grown.as_bool()] = region
        diff = s.diff_against(frame, before)
        s.record_undo([diff] if diff else [], [])
        return {"applied": True, "frames": [frame],
                "changed_voxels": int(diff[1].size) if diff else 0}

    def apply_track_edit(s: Session, body: dict) -> dict:
        t0 = _clamp_or_404(int(body.get("template_frame", 0)), len(s.seq),
                           "template_frame")
        region = int(body["region"])
        to_frame = int(body.get("to_frame", len(s.seq) - 1))
        to_frame = _clamp_or_404(to_frame, len(s.seq), "to_frame")
        if to_frame <= t0:
            raise HTTPException(422, "to_frame must be after template_frame")
        template = binary_labelmap(s.geom, s.labels[t0] == region)
        sub = Sequence4D(list(s.seq.frames[t0:to_frame + 1]),
                         s.seq.frame_interval_s, s.seq.case_id)
        try:
            steps = track_rigid(sub, template)
        except SwctError as e:
            raise HTTPException(422, str(e)) from e
        diffs = []
        frames = []
        for k, step in enumerate(steps[1:], start=1):
            frame = t0 + k
            before = s.snapshot(frame)
            region_mask_update(s, frame, region, step.mask.as_bool())
            d = s.diff_against(frame, before)
            if d:
                diffs.append(d)
            frames.append(frame)
        s.record_undo(diffs, [])
        return {"applied": True, "frames": frames,
                "changed_voxels": int(sum(d[1].size for d in diffs))}

    def apply_paint_edit(s: Session, body: dict, erase: bool) -> dict:
        frame = _clamp_or_404(int(body["frame"]), len(s.seq), "frame")
        region = int(body["region"])
        dims = s.geom.dims
        before = s.snapshot(frame)
        lab = s.labels[frame]
        for run in body.get("runs", []):
            x, y, z, length = (int(v) for v in run)
            if not (0 <= y < dims[1] and 0 <= z < dims[2] and
                    0 <= x and x + length <= dims[0] and length > 0):
                raise HTTPException(422, f"run {run} out of bounds")
            if erase:
                lab[x:x + length, y, z] = 0
            else:
                lab[x:x + length, y, z] = region
        diff = s.diff_against(frame, before)
        s.record_undo([diff] if diff else [], [])
        return {"applied": True, "frames": [frame],
                "changed_voxels": int(diff[1].size) if diff else 0}

    def apply_undo(s: Session) -> dict:
        if not s.undo:
            return {"applied": False, "warning": "undo stack empty",
                    "changed_voxels": 0, "frames": []}
        rec = s.undo.pop()
        changed = 0
        frames = []
        for frame, idx, old in rec["labels"]:
            s.labels[frame].ravel()[idx] = old
            changed += int(idx.size)
            frames.append(frame)
        for key, old_state in rec["cages"]:
            if old_state is None:
                s.cages.pop(key, None)
            else:
                s.cages[key] = old_state
        return {"applied": True, "changed_voxels": changed, "frames": frames}

    @app.post("/s/{sid}/edit")
    def edit(sid: str, body: dict = Body(...),
             x_edit_token: str | None = Header(default=None)):
        s = get_session(sid)
        check_token(s, x_edit_token)
        kind = body.get("type")
        with s.lock:
            if kind == "cage":
                out = apply_cage_edit(s, body)
            elif kind == "grow":
                out = apply_grow_edit(s, body)
            elif kind == "track":
                out = apply_track_edit(s, body)
            elif kind in ("paint", "erase"):
                out = apply_paint_edit(s, body, erase=(kind == "erase"))
            elif kind == "undo":
                out = apply_undo(s)
            else:
                raise HTTPException(400, f"unknown edit type '{kind}'")
            if out.get("applied"):
                s.dirty = True
            out["undo_depth"] = len(s.undo)
            return out

    @app.post("/s/{sid}/undo")
    def undo(sid: str, x_edit_token: str | None = Header(default=None)):
        s = get_session(sid)
        check_token(s, x_edit_token)
        with s.lock:
            out = apply_undo(s)
            out["undo_depth"] = len(s.undo)
            return out

    @app.post("/s/{sid}/save")
    def save(sid: str, x_edit_token: str | None = Header(default=None)):
        s = get_session(sid)
        check_token(s, x_edit_token)
        with s.lock:
            manifest_path = s.case_dir / "case.json"
            manifest = json.loads(manifest_path.read_text())
            g = s.geom
            written = []
            for i, entry in enumerate(manifest["frames"]):
                name = entry.get("labels") or f"f{i:03d}_labels.nrrd"
                save_labels(LabelMap(g.spacing, g.origin, s.labels[i]),
                            s.case_dir / name)
                entry["labels"] = name
                written.append(name)
            manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
            cages = [{"frame": f, "region": r, "cage": st.cage.to_dict()}
                     for (f, r), st in sorted(s.cages.items())]
            (s.case_dir / "cages.json").write_text(json.dumps(cages) + "\n")
            s.dirty = False
            return {"saved": True, "labels": written,
                    "cages": str(s.case_dir / "cages.json")}

    @app.get("/s/{sid}/mesh")
    def mesh(sid: str, frame: int, region: int):
        s = get_session(sid)
        _clamp_or_404(frame, len(s.seq), "frame")
        with s.lock:
            mask = (s.labels[frame] == region).copy()
        m = marching_cubes(mask, s.geom)
        return Response(obj_text(m), media_type="text/plain")

    @app.get("/s/{sid}/dice")
    def dice_panel(sid: str, ref: str):
        s = get_session(sid)
        ref_dir = resolve_case(ref)
        if not (ref_dir / "case.json").exists():
            raise HTTPException(404, f"no reference case under {ref}")
        try:
            gt = load_case(ref_dir)
        except SwctError as e:
            raise HTTPException(422, f"invalid reference case: {e}") from e
        with s.lock:
            g = s.geom
            pred_frames = [Frame(fr.volume, LabelMap(g.spacing, g.origin,
                                                     s.labels[i].copy()))
                           for i, fr in enumerate(s.seq.frames)]
        pred = Sequence4D(pred_frames, s.seq.frame_interval_s, s.seq.case_id)
        try:
            report = dice_report(gt, pred)
        except SwctError as e:
            raise HTTPException(422, str(e)) from e
        return report.to_dict()

    @app.get("/s/{sid}/cage")
    def get_cage(sid: str, frame: int, region: int):
        s = get_session(sid)
        _clamp_or_404(frame, len(s.seq), "frame")
        with s.lock:
            key = (frame, int(region))
            state = s.cages.get(key)
            if state is None or state.binding is None:
                state = init_cage_state(s, frame, int(region),
                                        state.cage if state else None)
                s.cages[key] = state  # lattice binding only; labels untouched
            return {"frame": frame, "region": int(region),
                    "cage": state.cage.to_dict()}

    @app.put("/s/{sid}/cage")
    def put_cage(sid: str, frame: int, region: int, body: dict = Body(...),
                 x_edit_token: str | None = Header(default=None)):
        s = get_session(sid)
        check_token(s, x_edit_token)
        _clamp_or_404(frame, len(s.seq), "frame")
        try:
            cage = Cage.from_dict(body)
        except SwctError as e:
            raise HTTPException(422, str(e)) from e
        with s.lock:
            key = (frame, int(region))
            old = s.cages.get(key)
            state = init_cage_state(s, frame, int(region),
                                    cage.with_displaced(cage.rest))
            s.cages[key] = state
            if not np.array_equal(cage.displaced, cage.rest):
                # apply the full displacement as one undoable edit
                before = s.snapshot(frame)
                mesh = cage_deform(state.binding, cage)
                try:
                    new_mask = voxelize(mesh, s.geom).as_bool()
                except SwctError as e:
                    raise HTTPException(422, str(e)) from e
                region_mask_update(s, frame, int(region), new_mask)
                diff = s.diff_against(frame, before)
                s.record_undo([diff] if diff else [],
                              [(key, _CageState(old.cage) if old else None)])
                state.cage = cage
                s.dirty = True
            return {"frame": frame, "region": int(region),
                    "cage": state.cage.to_dict()}

    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(data_dir, port: int = 8080, host: str = "127.0.0.1", ui_dir=None):
    """Run the annotation service (blocking)."""
    import uvicorn
    app = create_app(data_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
