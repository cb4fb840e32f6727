"""Adam training with linear warmup and cosine decay."""

import json
import logging
import math
import os
from dataclasses import asdict

import numpy as np

from dwinformer import model as M
from dwinformer import tensor as T
from dwinformer.errors import CheckpointError, NumericError
from dwinformer.fileio import read_tensor, write_tensor
from dwinformer.losses import si_loss
from dwinformer.params import flatten
from dwinformer.scenes import DepthSample, dataset_iter, generate_scene, scene_specs

log = logging.getLogger(__name__)


def lr_at(step, lr_init, lr_peak, warmup_steps, total_steps):
    """Linear ramp lr_init -> lr_peak over ``warmup_steps``, then cosine to 0 at ``total_steps``."""
    if step < warmup_steps:
        return lr_init + (lr_peak - lr_init) * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0 if step >= total_steps else lr_peak
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in named_params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out

    def load_arrays(self, arrays, t):
        self.t = t
        self.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


# ---------------------------------------------------------------- datasets


def write_dataset(run, out_dir):
    """Generate the configured scenes into ``out_dir`` with a ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    specs = scene_specs(run.data.num_samples, run.data.seed, **run.data.scene_kwargs(run.model))
    entries = []
    for i, spec in enumerate(specs):
        sample = generate_scene(spec)
        img, dep = f"sample_{i:04d}_image.dwt", f"sample_{i:04d}_depth.dwt"
        write_tensor(os.path.join(out_dir, img), sample.image)
        write_tensor(os.path.join(out_dir, dep), sample.depth)
        entries.append({"index": i, "seed": spec.seed, "image": img, "depth": dep})
    manifest = {"max_depth": run.model.max_depth, "image_size": run.model.image_size, "samples": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return entries


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples = []
    for e in manifest["samples"]:
        img = read_tensor(os.path.join(data_dir, e["image"])).data
        dep = read_tensor(os.path.join(data_dir, e["depth"])).data
        samples.append(DepthSample(img.astype(np.float32), dep.astype(np.float32)))
    return samples


# ---------------------------------------------------------------- training


def save_train_state(path, params, config, adam, step, lr, run):
    meta = {
        "step": step,
        "lr": lr,
        "adam_t": adam.t,
        "train": asdict(run.train),
        # batch order is a pure function of (seed, step)
        "data_seed": run.train.seed,
    }
    tmp = path + ".tmp"
    M.save_weights(params, tmp, config, extra=adam.state_arrays(), meta=meta)
    os.replace(tmp, path)


def _batches(samples, run, step):
    nb = math.ceil(len(samples) / run.train.batch_size)
    epoch, idx = divmod(step, nb)
    batches = list(dataset_iter(samples, run.train.batch_size, seed=run.train.seed, epoch=epoch,
                                shuffle=run.train.shuffle, flip=run.data.flip))
    return batches[idx]


def train(run, samples, out_path, emit=print, resume=None, max_steps=None, init_seed=0):
    """Run (or resume) training, writing checkpoints to ``out_path``.

    ``emit`` receives CSV log lines. Returns the list of ``(step, lr, loss)``
    records. A non-finite loss raises :class:`NumericError` without
    overwriting the last checkpoint.
    """
    tc = run.train
    adam = Adam(tc.beta1, tc.beta2, tc.adam_eps)
    if resume is not None:
        config, params, arrays, meta = M.load_checkpoint(resume)
        if config != run.model:
            raise CheckpointError(f"{resume}: model config differs from the run config")
        adam.load_arrays(arrays, meta["adam_t"])
        start = int(meta["step"])
    else:
        config = run.model
        params = M.init_model(config, seed=init_seed)
        start = 0
    named = flatten(params)
    end = tc.total_steps if max_steps is None else min(tc.total_steps, max_steps)
    records = []
    emit("step,lr,loss")
    lr = lr_at(start, tc.lr_init, tc.lr_peak, tc.warmup_steps, tc.total_steps)
    for step in range(start, end):
        lr = lr_at(step, tc.lr_init, tc.lr_peak, tc.warmup_steps, tc.total_steps)
        images, depths = _batches(samples, run, step)
        for p in named.values():
            p.grad = None
        out = M.model_forward(images, params, config)
        loss = si_loss(out.depth, depths, lam=tc.si_lambda, alpha=tc.si_alpha)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        T.backward(loss)
        adam.step(named, lr)
        records.append((step, lr, value))
        if step % tc.log_every == 0 or step == end - 1:
            emit(f"{step},{lr!r},{value!r}")
        done = step + 1
        if tc.ckpt_every and done % tc.ckpt_every == 0 and done < end:
            save_train_state(out_path, params, config, adam, done, lr, run)
            log.info("checkpoint at step %d -> %s", done, out_path)
    save_train_state(out_path, params, config, adam, end, lr, run)
    return records
