"""Localhost labeling service: JSON API over the pairs file plus static
serving of the built annotation UI.

Label appends are serialized through one lock and flushed per record, so a
crash loses at most the in-flight label. Duplicate submissions for a pair
are rejected with 409 (first write wins).
"""

from __future__ import annotations

import json
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .preference import (
    LABEL_A,
    LABEL_B,
    LABEL_EQUAL,
    PreferenceRecord,
    read_records,
)

API_LABELS = {"a": LABEL_A, "b": LABEL_B, "equal": LABEL_EQUAL}


class LabelSession:
    """Cursor over a pairs file with an append-only label log.

    Skips keep the pair available for re-queue after the fresh pairs run
    out; undo removes the most recent label and re-queues its pair first.
    """

    def __init__(self, pairs_path, out_path):
        self.pairs = read_records(pairs_path)
        if not self.pairs:
            raise ValueError(f"no pairs in {pairs_path}")
        self.by_id = {r.pair_id: r for r in self.pairs}
        if len(self.by_id) != len(self.pairs):
            raise ValueError("duplicate pair ids in pairs file")
        self.out_path = Path(out_path)
        self.lock = threading.Lock()
        self.labeled: dict[str, PreferenceRecord] = {}
        self.label_order: list[str] = []
        self.skipped: list[str] = []
        self.requeued: list[str] = []
        if self.out_path.exists():
            for rec in read_records(self.out_path):
                if rec.pair_id in self.by_id and rec.label is not None:
                    self.labeled[rec.pair_id] = rec
                    self.label_order.append(rec.pair_id)

    # ---- queries ------------------------------------------------------

    def counts(self) -> dict:
        with self.lock:
            return self._counts()

    def _counts(self) -> dict:
        skipped = [p for p in self.skipped if p not in self.labeled]
        return {
            "total": len(self.pairs),
            "labeled": len(self.labeled),
            "skipped": len(skipped),
            "remaining": len(self.pairs) - len(self.labeled),
        }

    def current_pair(self) -> PreferenceRecord | None:
        with self.lock:
            return self._current()

    def _current(self) -> PreferenceRecord | None:
        for pid in self.requeued:
            if pid not in self.labeled:
                return self.by_id[pid]
        skipped = set(self.skipped)
        for rec in self.pairs:
            if rec.pair_id not in self.labeled and rec.pair_id not in skipped:
                return rec
        for pid in self.skipped:  # re-queue skips at session end
            if pid not in self.labeled:
                return self.by_id[pid]
        return None

    # ---- mutations ----------------------------------------------------

    def submit(self, pair_id: str, label: str) -> None:
        """Raises KeyError (unknown), ValueError (bad label), or
        ConflictError (already labeled)."""
        if label not in ("a", "b", "equal", "skip"):
            raise ValueError(f"bad label {label!r}")
        with self.lock:
            if pair_id not in self.by_id:
                raise KeyError(pair_id)
            if pair_id in self.labeled:
                raise ConflictError(pair_id)
            if label == "skip":
                if pair_id not in self.skipped:
                    self.skipped.append(pair_id)
                if pair_id in self.requeued:
                    self.requeued.remove(pair_id)
                return
            base = self.by_id[pair_id]
            rec = PreferenceRecord(
                pair_id=base.pair_id,
                state_a=base.state_a, state_b=base.state_b,
                scene_a=base.scene_a, scene_b=base.scene_b,
                label=API_LABELS[label], source="human", timestamp=time.time(),
            )
            self.labeled[pair_id] = rec
            self.label_order.append(pair_id)
            if pair_id in self.requeued:
                self.requeued.remove(pair_id)
            with open(self.out_path, "a") as f:
                f.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
                f.flush()
                os.fsync(f.fileno())

    def undo(self) -> str:
        """Remove the most recent label; returns the restored pair id."""
        with self.lock:
            if not self.label_order:
                raise ConflictError("nothing to undo")
            pid = self.label_order.pop()
            del self.labeled[pid]
            self.requeued.insert(0, pid)
            # rewrite the log minus its last record
            lines = self.out_path.read_text().splitlines() if self.out_path.exists() else []
            kept = []
            removed = False
            for line in reversed(lines):
                if not removed and line.strip() and json.loads(line)["pair_id"] == pid:
                    removed = True
                    continue
                kept.append(line)
            kept.reverse()
            tmp = self.out_path.with_suffix(".tmp")
            tmp.write_text("".join(l + "\n" for l in kept))
            os.replace(tmp, self.out_path)
            return pid


class ConflictError(Exception):
    pass


def make_handler(session: LabelSession, ui_dir: Path | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _json(self, code: int, obj) -> None:
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/api/session":
                self._json(200, session.counts())
            elif self.path == "/api/pair":
                rec = session.current_pair()
                counts = session.counts()
                progress = {"labeled": counts["labeled"], "total": counts["total"]}
                if rec is None:
                    self._json(200, {"pair_id": None, "progress": progress})
                else:
                    self._json(
                        200,
                        {
                            "pair_id": rec.pair_id,
                            "scene_a": rec.scene_a,
                            "scene_b": rec.scene_b,
                            "progress": progress,
                        },
                    )
            else:
                self._serve_static()

        def _serve_static(self):
            if ui_dir is None:
                self._json(404, {"error": "no UI built; use the JSON API"})
                return
            rel = self.path.lstrip("/") or "index.html"
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                self._json(404, {"error": f"not found: {self.path}"})
                return
            ctype = {
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".map": "application/json",
            }.get(target.suffix, "application/octet-stream")
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._json(400, {"error": "malformed JSON body"})
                return
            if self.path == "/api/label":
                pair_id = payload.get("pair_id")
                label = payload.get("label")
                if not isinstance(pair_id, str) or label not in ("a", "b", "equal", "skip"):
                    self._json(400, {"error": "need pair_id and label in a|b|equal|skip"})
                    return
                try:
                    session.submit(pair_id, label)
                except KeyError:
                    self._json(404, {"error": f"unknown pair_id {pair_id}"})
                except ConflictError:
                    self._json(409, {"error": f"pair {pair_id} already labeled"})
                else:
                    self._json(200, {"ok": True})
            elif self.path == "/api/undo":
                try:
                    pid = session.undo()
                except ConflictError:
                    self._json(409, {"error": "nothing to undo"})
                else:
                    self._json(200, {"restored_pair_id": pid})
            else:
                self._json(404, {"error": f"not found: {self.path}"})

    return Handler


def serve(pairs_path, out_path, port: int, ui_dir=None, ready_callback=None):
    """Run the labeling service until interrupted."""
    session = LabelSession(pairs_path, out_path)
    ui = Path(ui_dir) if ui_dir else None
    if ui is not None and not ui.is_dir():
        ui = None
    httpd = ThreadingHTTPServer(("127.0.0.1", port), make_handler(session, ui))
    if ready_callback:
        ready_callback(httpd, session)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return session
