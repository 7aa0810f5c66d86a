"""Checkpoint archive: parameters, optimizer moments, and run metadata.

The file is a plain zip so it can be inspected with standard tools, but it
is written for byte-level reproducibility rather than convenience:

* entries appear in a fixed order (manifest first, then parameters in
  ``named_parameters`` order, then optimizer buffers per group),
* every entry is stored uncompressed with a constant timestamp,
* arrays are raw little-endian float64 in C order, shapes live in the
  manifest.

Two runs that reach the same state therefore produce identical files,
which is what the determinism contract asks of `train`.
"""

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import ReportModel
from .optim import AdamState
from .syndata import Vocab

FORMAT = "memreport-checkpoint"
VERSION = 1
_EPOCH_STAMP = (1980, 1, 1, 0, 0, 0)


def _model_config(model):
    return {
        "vocab_size": model.vocab_size,
        "d": model.d,
        "n_heads": model.n_heads,
        "n_enc": len(model.enc_layers),
        "n_dec": len(model.dec_layers),
        "n_slots": model.n_slots,
        "d_feat": model.d_feat,
        "max_len": model.max_len,
        "mode": model.mode,
        "pad_id": model.pad_id,
        "bos_id": model.bos_id,
        "eos_id": model.eos_id,
    }


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH_STAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _array_bytes(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(path, model, vocab, optimizers=(), epoch=0, step=0, extra=None):
    """Write the archive; ``optimizers`` is the ordered list of Adam groups."""
    named = model.named_parameters()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model": _model_config(model),
        "vocab": vocab.words[4:],
        "epoch": int(epoch),
        "step": int(step),
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in named],
        "optimizers": [
            {
                "lr": opt.lr,
                "beta1": opt.beta1,
                "beta2": opt.beta2,
                "eps": opt.eps,
                "step_count": opt.step_count,
                "params": list(opt.params.keys()),
            }
            for opt in optimizers
        ],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, sort_keys=True, separators=(",", ":")))
        for name, p in named:
            _write_entry(zf, f"params/{name}", _array_bytes(p.data))
        for gi, opt in enumerate(optimizers):
            for name in opt.params:
                _write_entry(zf, f"opt/{gi}/{name}.m", _array_bytes(opt.m[name]))
                _write_entry(zf, f"opt/{gi}/{name}.v", _array_bytes(opt.v[name]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    """Loaded archive contents; arrays are plain float64 ndarrays."""

    manifest: dict
    params: dict
    opt_arrays: list


def load_checkpoint(path):
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise DataError(f"{path}: missing manifest.json") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: manifest is not valid JSON ({exc})") from exc
        if manifest.get("format") != FORMAT:
            raise DataError(f"{path}: not a {FORMAT} file")
        if manifest.get("version") != VERSION:
            raise DataError(f"{path}: unsupported version {manifest.get('version')}")
        params = {}
        for entry in manifest["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            raw = zf.read(f"params/{name}")
            want = int(np.prod(shape, dtype=np.int64)) * 8
            if len(raw) != want:
                raise DataError(
                    f"{path}: params/{name} holds {len(raw)} bytes, expected {want}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        opt_arrays = []
        for gi, group in enumerate(manifest["optimizers"]):
            m, v = {}, {}
            for name in group["params"]:
                shape = params[name].shape
                m[name] = np.frombuffer(zf.read(f"opt/{gi}/{name}.m"),
                                        dtype="<f8").copy()
                v[name] = np.frombuffer(zf.read(f"opt/{gi}/{name}.v"),
                                        dtype="<f8").copy()
                if m[name].size != params[name].size:
                    raise DataError(f"{path}: optimizer buffer for {name} has wrong size")
            opt_arrays.append({"m": m, "v": v})
    return Checkpoint(manifest=manifest, params=params, opt_arrays=opt_arrays)


def restore_model(ckpt):
    """Rebuild the model and vocabulary exactly as saved."""
    cfg = ckpt.manifest["model"]
    model = ReportModel(**cfg, seed=0)
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise DataError(f"checkpoint parameter set does not match model: {missing[:5]}")
    for name, p in named.items():
        saved = ckpt.params[name]
        if saved.shape != p.data.shape:
            raise DataError(f"parameter {name} has shape {saved.shape}, "
                            f"model expects {p.data.shape}")
        p.data = saved.copy()
    vocab = Vocab(ckpt.manifest["vocab"])
    if len(vocab) != cfg["vocab_size"]:
        raise DataError(f"manifest vocabulary has {len(vocab)} entries, "
                        f"model expects {cfg['vocab_size']}")
    return model, vocab


def restore_optimizers(ckpt, model):
    """Adam groups with moments and counters as saved, bound to ``model``."""
    named = dict(model.named_parameters())
    groups = []
    for spec, arrays in zip(ckpt.manifest["optimizers"], ckpt.opt_arrays):
        params = [(name, named[name]) for name in spec["params"]]
        opt = AdamState(params, lr=spec["lr"], beta1=spec["beta1"],
                        beta2=spec["beta2"], eps=spec["eps"])
        opt.step_count = spec["step_count"]
        for name in opt.params:
            opt.m[name] = arrays["m"][name]
            opt.v[name] = arrays["v"][name]
        groups.append(opt)
    return groups
