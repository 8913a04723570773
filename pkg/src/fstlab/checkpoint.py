"""Checkpoint container: a NumPy ``.npz`` archive with named sections.

Keys::

    format            "fstlab-checkpoint-1"
    config            JSON: {"model": ModelConfig, "train": TrainConfig | null}
    param/<name>      model parameters and persistent buffers (dtype preserved)
    codebook/codes    K x h_d k-means codebook (kmeans quantizer only)
    codebook/meta     JSON: {"method", "K", "ready"}
    optim/<i>/<key>   Adam state per parameter index (resume only)
    trainer           JSON trainer state: step, phase, numpy RNG state, best dev score
    torch_rng         uint8 torch CPU RNG state (resume only)

Arrays are written without pickling, so load/save round trips are bit exact.
"""
import json

import numpy as np
import torch

from .model import FSTModel, ModelConfig

FORMAT = "fstlab-checkpoint-1"

_TORCH_DTYPES = {np.dtype("float32"): torch.float32, np.dtype("float64"): torch.float64}


def _np(t):
    return t.detach().cpu().numpy().copy()


def _json(arr):
    return json.loads(str(arr[()]))


def save_checkpoint(path, model, train_config=None, optimizer=None, trainer_state=None):
    arrays = {"format": np.array(FORMAT)}
    cfg = {"model": model.config.to_dict(), "train": train_config.to_dict() if train_config else None}
    arrays["config"] = np.array(json.dumps(cfg))
    for name, t in model.state_dict().items():
        if name == "codebook":
            continue
        arrays[f"param/{name}"] = _np(t)
    if model.config.quantizer == "kmeans":
        arrays["codebook/codes"] = _np(model.codebook)
        meta = {"method": "kmeans", "K": model.config.codebook_size, "ready": bool(model.codebook_ready)}
        arrays["codebook/meta"] = np.array(json.dumps(meta))
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arrays[f"optim/{idx}/{key}"] = _np(val) if torch.is_tensor(val) else np.array(val)
        arrays["optim_groups"] = np.array(json.dumps(sd["param_groups"]))
    if trainer_state is not None:
        arrays["trainer"] = np.array(json.dumps(trainer_state))
        arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class Checkpoint:
    """A loaded container; ``model`` is ready for inference (eval mode)."""

    def __init__(self, path):
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        if "format" not in data or str(data["format"][()]) != FORMAT:
            raise ValueError(f"{path}: not an fstlab checkpoint")
        self.path = str(path)
        self.arrays = data
        cfg = _json(data["config"])
        self.model_config = ModelConfig.from_dict(cfg["model"])
        self.train_config_dict = cfg["train"]
        self.model = self._build_model()
        self.trainer_state = _json(data["trainer"]) if "trainer" in data else None

    def _build_model(self):
        params = {k[len("param/"):]: v for k, v in self.arrays.items() if k.startswith("param/")}
        dtype = _TORCH_DTYPES[next(iter(params.values())).dtype]
        model = FSTModel(self.model_config).to(dtype)
        state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
        if "codebook/codes" in self.arrays:
            state["codebook"] = torch.from_numpy(self.arrays["codebook/codes"].copy())
            model.codebook_ready = _json(self.arrays["codebook/meta"])["ready"]
        model.load_state_dict(state)
        model.eval()
        return model

    def restore_optimizer(self, optimizer):
        sd = optimizer.state_dict()
        groups = json.loads(str(self.arrays["optim_groups"][()]))
        state = {}
        for key, val in self.arrays.items():
            if not key.startswith("optim/"):
                continue
            _, idx, name = key.split("/")
            state.setdefault(int(idx), {})[name] = torch.from_numpy(val.copy())
        for g_saved, g in zip(groups, sd["param_groups"]):
            g_saved["params"] = g["params"]
        optimizer.load_state_dict({"state": state, "param_groups": groups})

    def restore_torch_rng(self):
        torch.set_rng_state(torch.from_numpy(self.arrays["torch_rng"].copy()))


def load_checkpoint(path):
    return Checkpoint(path)
