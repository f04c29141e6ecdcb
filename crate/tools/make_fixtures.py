#!/usr/bin/env python3
"""Train the desk-scale model zoo and write it in the toolkit's formats.

Produces, for each of the chain / residual / depthwise networks:
  <name>.ldfc          the trained model (BatchNorm kept unfused)
  <name>.refs.ldfd     16 fixed inputs with the framework's own outputs
plus eval.ldfd (labelled held-out split) and zoo.json (accuracies, seeds).

The task: 10 classes of 1x8x8 images, each a smoothed random prototype,
randomly shifted by up to one pixel, with additive noise; inputs are
standardized and clipped to +-2.5.

Usage: python3 tools/make_fixtures.py [out_dir] [--seed S]
"""

import argparse
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CLASSES = 10
SHAPE = (1, 8, 8)
ALIGN = 64


def make_task(seed, n_train, n_eval):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(CLASSES, 8, 8))
    kernel = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0
    smooth = np.zeros_like(protos)
    for c in range(CLASSES):
        padded = np.pad(protos[c], 1, mode="wrap")
        for y in range(8):
            for x in range(8):
                smooth[c, y, x] = (padded[y:y + 3, x:x + 3] * kernel).sum()
    smooth /= smooth.std(axis=(1, 2), keepdims=True)

    def sample(n):
        labels = np.arange(n) % CLASSES
        rng.shuffle(labels)
        xs = np.empty((n, 8, 8))
        for i, c in enumerate(labels):
            dy, dx = rng.integers(-1, 2, size=2)
            xs[i] = np.roll(smooth[c], (dy, dx), axis=(0, 1)) + rng.normal(scale=1.6, size=(8, 8))
        return xs, labels

    xtr, ytr = sample(n_train)
    xev, yev = sample(n_eval)
    mean, std = xtr.mean(), xtr.std()
    norm = lambda a: np.clip((a - mean) / std, -2.5, 2.5).astype(np.float32)[:, None]
    return norm(xtr), ytr.astype(np.int64), norm(xev), yev.astype(np.int64)


class Unit(nn.Module):
    def __init__(self, cin, cout, k=3, stride=1, groups=1, padding=None):
        super().__init__()
        padding = k // 2 if padding is None else padding
        self.conv = nn.Conv2d(cin, cout, k, stride=stride, padding=padding, groups=groups)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Chain(nn.Module):
    def __init__(self):
        super().__init__()
        self.units = nn.ModuleList([
            Unit(1, 16),
            Unit(16, 32, stride=2),
            Unit(32, 64, stride=2),
            Unit(64, 128, k=2, padding=0),
        ])
        self.head = nn.Linear(128, CLASSES)
        self.names = ["conv1", "conv2", "conv3", "fc"]
        self.preds = [[], ["conv1"], ["conv2"], ["conv3"]]

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return self.head(x.mean(dim=(2, 3)))


class Residual(nn.Module):
    def __init__(self):
        super().__init__()
        self.units = nn.ModuleList([Unit(1, 16), Unit(16, 16), Unit(16, 16), Unit(16, 16, stride=2)])
        self.head = nn.Linear(16, CLASSES)
        self.names = ["stem", "res1", "res2", "down"]
        self.preds = [[], ["stem"], ["res1"], ["stem", "res2"]]

    def forward(self, x):
        a = self.units[0](x)
        b = self.units[2](self.units[1](a))
        y = self.units[3](a + b)
        return self.head(y.mean(dim=(2, 3)))


class Depthwise(nn.Module):
    def __init__(self):
        super().__init__()
        self.units = nn.ModuleList([
            Unit(1, 16),
            Unit(16, 16, groups=16),
            Unit(16, 16, k=1),
            Unit(16, 16, stride=2, groups=16),
            Unit(16, 32, k=1),
        ])
        self.head = nn.Linear(32, CLASSES)
        self.names = ["stem", "dw1", "pw1", "dw2", "pw2"]
        self.preds = [[], ["stem"], ["dw1"], ["pw1"], ["dw2"]]

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return self.head(x.mean(dim=(2, 3)))


def train(model, xtr, ytr, seed, epochs=30):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    x, y = torch.from_numpy(xtr), torch.from_numpy(ytr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        model.train()
        perm = torch.randperm(len(x), generator=g)
        for i in range(0, len(x), 128):
            idx = perm[i:i + 128]
            opt.zero_grad()
            F.cross_entropy(model(x[idx]), y[idx]).backward()
            opt.step()
        sched.step()
    model.eval()


@torch.no_grad()
def accuracy(model, x, y):
    pred = model(torch.from_numpy(x)).argmax(dim=1).numpy()
    return float((pred == y).mean())


class Container:
    def __init__(self):
        self.entries = []
        self.blobs = []
        self.offset = 0

    def add(self, name, array, dtype="f32"):
        array = np.ascontiguousarray(array, dtype="<f4" if dtype == "f32" else "<u4")
        self.offset = -(-self.offset // ALIGN) * ALIGN
        data = array.tobytes()
        self.entries.append({"name": name, "dtype": dtype, "shape": list(array.shape),
                             "offset": self.offset, "length": len(data)})
        self.blobs.append((self.offset, data))
        self.offset += len(data)
        return name

    def write(self, path, magic, meta):
        meta = dict(meta)
        meta["tensors"] = self.entries
        manifest = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        header = magic + bytes([1]) + struct.pack("<Q", len(manifest)) + manifest
        start = -(-len(header) // ALIGN) * ALIGN
        out = bytearray(header) + bytes(start - len(header))
        for off, data in self.blobs:
            out += bytes(start + off - len(out))
            out += data
        with open(path, "wb") as f:
            f.write(bytes(out))


def export(model, path):
    c = Container()
    blocks = []
    for name, unit, preds in zip(model.names, model.units, model.preds):
        conv, bn = unit.conv, unit.bn
        blocks.append({
            "id": name,
            "predecessors": preds,
            "combine": "add" if len(preds) > 1 else "single",
            "pool": None,
            "conv": {
                "weight": c.add(f"{name}.weight", conv.weight.detach().numpy()),
                "bias": c.add(f"{name}.bias", conv.bias.detach().numpy()),
                "stride": list(conv.stride),
                "padding": list(conv.padding),
                "groups": conv.groups,
            },
            "batchnorm": {
                "eps": bn.eps,
                "mu": c.add(f"{name}.bn.mu", bn.running_mean.numpy()),
                "sigma": c.add(f"{name}.bn.sigma", bn.running_var.sqrt().numpy()),
                "gamma": c.add(f"{name}.bn.gamma", bn.weight.detach().numpy()),
                "beta": c.add(f"{name}.bn.beta", bn.bias.detach().numpy()),
            },
            "activation": "relu",
        })
    head = model.head
    w = head.weight.detach().numpy()
    blocks.append({
        "id": "head",
        "predecessors": [model.names[-1]],
        "combine": "single",
        "pool": "global",
        "conv": {
            "weight": c.add("head.weight", w.reshape(w.shape[0], w.shape[1], 1, 1)),
            "bias": c.add("head.bias", head.bias.detach().numpy()),
            "stride": [1, 1],
            "padding": [0, 0],
            "groups": 1,
        },
        "batchnorm": None,
        "activation": "identity",
    })
    c.write(path, b"LDFC", {"format": "ldfc", "input_shape": list(SHAPE), "output": "head", "blocks": blocks})


def write_dataset(path, inputs, labels=None, outputs=None):
    c = Container()
    c.add("inputs", inputs)
    if labels is not None:
        c.add("labels", labels.astype(np.uint32), dtype="u32")
    if outputs is not None:
        c.add("outputs", outputs)
    c.write(path, b"LDFD", {"format": "ldfd", "samples": int(len(inputs))})


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default=os.path.join(os.path.dirname(__file__), "..", "fixtures", "zoo"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)

    xtr, ytr, xev, yev = make_task(args.seed, 10000, 2000)
    write_dataset(os.path.join(args.out, "eval.ldfd"), xev, yev)
    refs = xev[:16]
    summary = {"seed": args.seed, "task": "10-class 1x8x8 shifted prototypes", "models": {}}
    for i, (name, cls) in enumerate([("chain", Chain), ("residual", Residual), ("depthwise", Depthwise)]):
        torch.manual_seed(args.seed * 100 + i)
        model = cls()
        train(model, xtr, ytr, args.seed * 100 + i)
        tr, ev = accuracy(model, xtr, ytr), accuracy(model, xev, yev)
        if tr < 0.9:
            raise SystemExit(f"{name}: train accuracy {tr:.3f} below 0.9")
        export(model, os.path.join(args.out, f"{name}.ldfc"))
        with torch.no_grad():
            out = model(torch.from_numpy(refs)).numpy()
        write_dataset(os.path.join(args.out, f"{name}.refs.ldfd"), refs, outputs=out)
        summary["models"][name] = {"train_accuracy": tr, "eval_accuracy": ev}
        print(f"{name}: train {tr:.4f} eval {ev:.4f}")
    with open(os.path.join(args.out, "zoo.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
