"""Checkpoints: trained tensors plus everything needed to featurize new pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .grouping import Grouping
from .micro_graph import InteractionLog
from .model import ModelConfig, ModelParams
from .storage import load_arrays, save_arrays
from .trainer import TrainConfig

KIND = "macgnn-checkpoint"


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    train_config: TrainConfig
    history: InteractionLog  # the stock window the groupings and graph came from
    user_grouping: Grouping
    item_grouping: Grouping
    best_epoch: int = 0


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    h = ckpt.history
    arrays.update({"history/users": h.users, "history/items": h.items, "history/labels": h.labels, "history/timestamps": h.timestamps})
    arrays["grouping/user"] = np.asarray(ckpt.user_grouping.assignments, dtype=np.int64)
    arrays["grouping/item"] = np.asarray(ckpt.item_grouping.assignments, dtype=np.int64)
    meta = {
        "kind": KIND,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "user_ids": list(h.user_ids),
        "item_ids": list(h.item_ids),
        "K": {"user": ckpt.user_grouping.K, "item": ckpt.item_grouping.K},
        "modes": {"user": ckpt.user_grouping.mode, "item": ckpt.item_grouping.mode},
        "best_epoch": ckpt.best_epoch,
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path: str) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != KIND:
        raise DataError(f"{path} is not a checkpoint")
    try:
        mcfg = ModelConfig.from_dict(meta["model_config"])
        tcfg = TrainConfig.from_dict(meta["train_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad config block: {exc}") from None
    params = ModelParams({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    expected = mcfg.shapes()
    if set(params) != set(expected):
        raise DataError(f"{path}: tensors {sorted(set(params) ^ set(expected))} missing or unexpected")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise DataError(f"{path}: {name} has shape {params[name].shape}, config expects {tuple(shape)}")
    user_ids, item_ids = meta["user_ids"], meta["item_ids"]
    history = InteractionLog(
        arrays["history/users"], arrays["history/items"], arrays["history/labels"], arrays["history/timestamps"],
        len(user_ids), len(item_ids), user_ids, item_ids,
    )
    if (mcfg.n_users, mcfg.n_items) != (history.n, history.m):
        raise DataError(f"{path}: embedding tables do not match the stored id maps")
    groupings = []
    for side in ("user", "item"):
        a = arrays[f"grouping/{side}"]
        groupings.append(Grouping(a, int(meta["K"][side]), float("nan"), mode=meta["modes"][side]))
    if mcfg.n_macros != groupings[0].K + groupings[1].K + 2:
        raise DataError(f"{path}: macro table does not match the stored groupings")
    return Checkpoint(params, mcfg, tcfg, history, groupings[0], groupings[1], int(meta.get("best_epoch", 0)))
