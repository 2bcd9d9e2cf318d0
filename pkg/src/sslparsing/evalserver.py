"""Benchmark scoring service with a withheld ground-truth test set.

Submissions are tar archives of ``<image_id>.png`` label rasters. Each one is
stored under ``<spool>/<id>/`` with an atomically replaced ``status.json`` and,
once scored, the exact ``report.json`` text the local ``eval`` command writes.
"""
from __future__ import annotations

import io
import json
import os
import tarfile
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path, PurePosixPath

from .errors import RasterError
from .metrics import ConfusionMatrix, accumulate_confusion, compute_metrics, report_to_json
from .raster_io import DatasetIndex, decode_label_bytes, read_label_map
from .taxonomy import PartTaxonomy, lip_taxonomy


class SubmissionNotFound(KeyError):
    pass


@dataclass(frozen=True)
class Submission:
    id: str
    received_at: float
    status: str  # queued | scored | failed
    report_json: str | None = None
    failure_reason: str | None = None

    @property
    def mean_iou(self) -> float | None:
        if self.report_json is None:
            return None
        return json.loads(self.report_json)["mean_iou"]

    def to_json(self) -> str:
        head = json.dumps({"id": self.id, "received_at": self.received_at, "status": self.status})[:-1]
        if self.status == "failed":
            return head + f', "failure_reason": {json.dumps(self.failure_reason)}}}\n'
        if self.report_json is not None:
            return head + ', "report": ' + self.report_json.strip() + "}\n"
        return head + "}\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def build_archive(pred_dir: str | Path, image_ids) -> bytes:
    """Pack ``<pred_dir>/<id>.png`` for each id into an uncompressed tar."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        for image_id in image_ids:
            tar.add(Path(pred_dir) / f"{image_id}.png", arcname=f"{image_id}.png")
    return buf.getvalue()


class EvalServer:
    def __init__(self, gt_index: DatasetIndex, spool: str | Path, t: PartTaxonomy | None = None):
        self.t = t or lip_taxonomy()
        self.spool = Path(spool)
        self.spool.mkdir(parents=True, exist_ok=True)
        self._gt = {}
        for r in gt_index.records:
            if r.label_path is None:
                raise ValueError(f"secret manifest lacks a label for {r.image_id}")
            self._gt[r.image_id] = r.label_path
        self._order = [r.image_id for r in gt_index.records]
        self._lock = threading.Lock()
        self._subs: dict[str, Submission] = {}
        self._next = 1
        self._rescan()

    def _rescan(self) -> None:
        for d in sorted(self.spool.iterdir()):
            status = d / "status.json"
            if not d.is_dir() or not status.exists():
                continue
            info = json.loads(status.read_text(encoding="utf-8"))
            report = d / "report.json"
            sub = Submission(
                info["id"],
                info["received_at"],
                info["status"],
                report.read_text(encoding="utf-8") if report.exists() and info["status"] == "scored" else None,
                info.get("failure_reason"),
            )
            if sub.status == "queued":
                # scoring was interrupted; archives are kept, so redo it
                self._subs[sub.id] = sub
                self._score(sub.id, (d / "archive.tar").read_bytes())
            else:
                self._subs[sub.id] = sub
            self._next = max(self._next, int(sub.id.lstrip("s")) + 1)

    def _store(self, sub: Submission) -> None:
        d = self.spool / sub.id
        if sub.report_json is not None:
            _atomic_write(d / "report.json", sub.report_json)
        _atomic_write(
            d / "status.json",
            json.dumps(
                {"id": sub.id, "received_at": sub.received_at, "status": sub.status,
                 "failure_reason": sub.failure_reason},
                sort_keys=True,
            ),
        )
        with self._lock:
            self._subs[sub.id] = sub

    def submit(self, archive: bytes) -> str:
        with self._lock:
            sub_id = f"s{self._next:06d}"
            self._next += 1
            received = time.time()
        d = self.spool / sub_id
        d.mkdir()
        (d / "archive.tar").write_bytes(archive)
        self._store(Submission(sub_id, received, "queued"))
        self._score(sub_id, archive)
        return sub_id

    def _score(self, sub_id: str, archive: bytes) -> None:
        queued = self._subs[sub_id]
        try:
            report_json = self.score_archive(archive)
        except RasterError as exc:
            self._store(Submission(sub_id, queued.received_at, "failed", failure_reason=str(exc)))
            return
        self._store(Submission(sub_id, queued.received_at, "scored", report_json))

    def score_archive(self, archive: bytes) -> str:
        """Validate an archive and return the report JSON text; raises RasterError on bad input."""
        try:
            tar = tarfile.open(fileobj=io.BytesIO(archive), mode="r:*")
        except tarfile.TarError as exc:
            raise RasterError(f"unreadable archive ({exc})") from None
        blobs: dict[str, bytes] = {}
        unexpected = []
        with tar:
            for member in tar.getmembers():
                if not member.isfile():
                    continue
                name = PurePosixPath(member.name).name
                stem, suffix = name.rsplit(".", 1) if "." in name else (name, "")
                if suffix.lower() != "png" or stem not in self._gt or stem in blobs:
                    unexpected.append(name)
                    continue
                blobs[stem] = tar.extractfile(member).read()
        missing = [i for i in self._order if i not in blobs]
        problems = []
        if missing:
            problems.append("missing files: " + ", ".join(f"{i}.png" for i in missing))
        if unexpected:
            problems.append("unexpected files: " + ", ".join(sorted(unexpected)))
        if problems:
            raise RasterError("; ".join(problems))

        cm = ConfusionMatrix.zeros(self.t.num_classes)
        for image_id in self._order:
            pred = decode_label_bytes(blobs[image_id], f"{image_id}.png", self.t.num_classes)
            gt = read_label_map(self._gt[image_id], self.t.num_classes)
            if pred.shape != gt.shape:
                raise RasterError(f"{image_id}.png: shape {pred.shape} does not match the test image")
            cm = cm + accumulate_confusion(gt, pred, self.t.num_classes)
        return report_to_json(compute_metrics(cm))

    def get_report(self, sub_id: str) -> Submission:
        with self._lock:
            if sub_id not in self._subs:
                raise SubmissionNotFound(sub_id)
            return self._subs[sub_id]

    def leaderboard(self) -> list[tuple[str, float]]:
        with self._lock:
            scored = [s for s in self._subs.values() if s.status == "scored"]
        scored.sort(key=lambda s: (-s.mean_iou, s.received_at, s.id))
        return [(s.id, s.mean_iou) for s in scored]


class _Handler(BaseHTTPRequestHandler):
    server_version = "sslparsing-eval/1"
    evaluator: EvalServer

    def _send(self, code: int, body: str, ctype: str = "application/json") -> None:
        data = body.encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, code: int, message: str) -> None:
        self._send(code, json.dumps({"error": message}) + "\n")

    def log_message(self, fmt, *args):  # keep stderr quiet under test
        pass

    def do_POST(self):
        if self.path.rstrip("/") != "/submissions":
            return self._error(HTTPStatus.NOT_FOUND, "no such endpoint")
        length = int(self.headers.get("Content-Length", "0"))
        sub_id = self.evaluator.submit(self.rfile.read(length))
        sub = self.evaluator.get_report(sub_id)
        self._send(HTTPStatus.CREATED, json.dumps({"id": sub.id, "status": sub.status}) + "\n")

    def do_GET(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        try:
            if parts == ["leaderboard"]:
                board = [{"id": i, "mean_iou": m} for i, m in self.evaluator.leaderboard()]
                return self._send(HTTPStatus.OK, json.dumps(board) + "\n")
            if len(parts) == 2 and parts[0] == "submissions":
                return self._send(HTTPStatus.OK, self.evaluator.get_report(parts[1]).to_json())
            if len(parts) == 3 and parts[0] == "submissions" and parts[2] == "report":
                sub = self.evaluator.get_report(parts[1])
                if sub.report_json is None:
                    return self._error(HTTPStatus.CONFLICT, f"submission is {sub.status}")
                return self._send(HTTPStatus.OK, sub.report_json)
        except SubmissionNotFound:
            return self._error(HTTPStatus.NOT_FOUND, "unknown submission id")
        return self._error(HTTPStatus.NOT_FOUND, "no such endpoint")


def make_http_server(evaluator: EvalServer, host: str = "127.0.0.1", port: int = 8765) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"evaluator": evaluator})
    return ThreadingHTTPServer((host, port), handler)
