#!/usr/bin/env python3
"""Train the desk-scale CNN on the synthetic task and emit the committed
artifacts: data/desk_net.vglm, data/desk_batch.vglb, the torch checkpoint
and the export manifest used by the bridge.

Run from the repository root:  python3 scripts/make_desk_net.py
"""

import json
import os
import sys

import numpy as np
import torch
import torch.nn as nn

sys.path.insert(0, os.path.dirname(__file__))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from synth_data import make_split

from vfscan import model_io
from vfscan.engine import LayerSpec, Network, forward

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data")
SEED = 2024
NOISE = 4.0
EPOCHS = 25
BATCH_SIZE = 64


class DeskNet(nn.Module):
    """4 conv layers with a residual join, 16x16x3 -> 10 classes."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(8)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(16)
        self.conv3 = nn.Conv2d(16, 16, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(16)
        self.conv4 = nn.Conv2d(16, 16, 3, padding=1)
        self.bn4 = nn.BatchNorm2d(16)
        self.pool = nn.MaxPool2d(2)
        self.fc = nn.Linear(16, 10)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.relu(self.bn2(self.conv2(x)))
        skip = x
        x = self.pool(torch.relu(self.bn3(self.conv3(x)) + skip))
        x = torch.relu(self.bn4(self.conv4(x)))
        x = x.mean(dim=(2, 3))
        return self.fc(x)


def train(model, x_train, y_train, x_test, y_test):
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    loss_fn = nn.CrossEntropyLoss()
    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train.astype(np.int64))
    n = len(xt)
    for epoch in range(EPOCHS):
        model.train()
        perm = torch.randperm(n)
        total = 0.0
        for i in range(0, n, BATCH_SIZE):
            idx = perm[i:i + BATCH_SIZE]
            opt.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        acc = evaluate(model, x_test, y_test)
        print(f"epoch {epoch + 1:2d}  loss {total / n:.4f}  test acc {acc:.3f}")
    return model


@torch.no_grad()
def evaluate(model, x, y):
    model.eval()
    pred = model(torch.from_numpy(x)).argmax(dim=1).numpy()
    return float((pred == y).mean())


def to_engine_network(model):
    """Flatten the trained module into the analyzer's layer DAG."""
    sd = {k: v.detach().numpy().astype(np.float32)
          for k, v in model.state_dict().items()}

    def conv(name, stride=1):
        return LayerSpec("conv2d", weight=sd[f"{name}.weight"],
                         bias=sd[f"{name}.bias"], kernel=3, stride=stride,
                         padding=1)

    def bn(name):
        return LayerSpec("batchnorm", gamma=sd[f"{name}.weight"],
                         beta=sd[f"{name}.bias"],
                         running_mean=sd[f"{name}.running_mean"],
                         running_var=sd[f"{name}.running_var"], eps=1e-5)

    layers = [
        conv("conv1", stride=2),               # 0
        bn("bn1"),                             # 1
        LayerSpec("relu"),                     # 2
        conv("conv2"),                         # 3
        bn("bn2"),                             # 4
        LayerSpec("relu"),                     # 5
        conv("conv3"),                         # 6
        bn("bn3"),                             # 7
        LayerSpec("residual-add", inputs=(7, 5)),   # 8
        LayerSpec("relu"),                     # 9
        LayerSpec("maxpool", kernel=2, stride=2),   # 10
        conv("conv4"),                         # 11
        bn("bn4"),                             # 12
        LayerSpec("relu"),                     # 13
        LayerSpec("globalavgpool"),            # 14
        LayerSpec("flatten"),                  # 15
        LayerSpec("linear", weight=sd["fc.weight"], bias=sd["fc.bias"]),  # 16
    ]
    layers[0].inputs = (-1,)
    return Network(layers, 10, (3, 16, 16))


def manifest_layers():
    def conv(name, inputs, stride=1):
        return {"kind": "conv2d", "inputs": inputs, "kernel": 3, "stride": stride,
                "padding": 1, "groups": 1,
                "params": {"weight": f"{name}.weight", "bias": f"{name}.bias"}}

    def bn(name, inputs):
        return {"kind": "batchnorm", "inputs": inputs, "eps": 1e-5,
                "params": {"gamma": f"{name}.weight", "beta": f"{name}.bias",
                           "running_mean": f"{name}.running_mean",
                           "running_var": f"{name}.running_var"}}

    return [
        conv("conv1", [-1], stride=2),
        bn("bn1", [0]),
        {"kind": "relu", "inputs": [1]},
        conv("conv2", [2]),
        bn("bn2", [3]),
        {"kind": "relu", "inputs": [4]},
        conv("conv3", [5]),
        bn("bn3", [6]),
        {"kind": "residual-add", "inputs": [7, 5]},
        {"kind": "relu", "inputs": [8]},
        {"kind": "maxpool", "inputs": [9], "kernel": 2, "stride": 2, "padding": 0},
        conv("conv4", [10]),
        bn("bn4", [11]),
        {"kind": "relu", "inputs": [12]},
        {"kind": "globalavgpool", "inputs": [13]},
        {"kind": "flatten", "inputs": [14]},
        {"kind": "linear", "inputs": [15],
         "params": {"weight": "fc.weight", "bias": "fc.bias"}},
    ]


def main():
    os.makedirs(DATA_DIR, exist_ok=True)
    torch.manual_seed(SEED)
    np.random.seed(SEED)
    torch.set_num_threads(2)

    (x_train, y_train), (x_test, y_test) = make_split(SEED, noise=NOISE)
    model = DeskNet()
    train(model, x_train, y_train, x_test, y_test)
    model.eval()

    net = to_engine_network(model)
    batch_x, batch_y = x_test[:100], y_test[:100]

    engine_logits = forward(net, batch_x)
    torch_logits = model(torch.from_numpy(batch_x)).detach().numpy()
    max_dev = float(np.max(np.abs(engine_logits - torch_logits)))
    engine_acc = float((np.argmax(engine_logits, axis=1) == batch_y).mean())
    print(f"engine vs torch max |dlogit| = {max_dev:.3e}")
    print(f"engine accuracy on the committed batch = {engine_acc:.3f}")
    assert engine_acc > 0.60, "desk net must clear 60% accuracy"
    assert max_dev < 1e-3, "engine/torch disagreement too large"

    model_io.save_model(net, os.path.join(DATA_DIR, "desk_net.vglm"))
    model_io.save_batch(batch_x, batch_y, os.path.join(DATA_DIR, "desk_batch.vglb"))
    torch.save(model.state_dict(), os.path.join(DATA_DIR, "desk_checkpoint.pt"))
    torch.save({"images": torch.from_numpy(batch_x),
                "labels": torch.from_numpy(batch_y.astype(np.int64))},
               os.path.join(DATA_DIR, "desk_val.pt"))

    manifest = {
        "checkpoint": "desk_checkpoint.pt",
        "data": "desk_val.pt",
        "input_shape": [3, 16, 16],
        "classes": 10,
        "normalization": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]},
        "out_model": "desk_net.vglm",
        "out_batch": "desk_batch.vglb",
        "layers": manifest_layers(),
    }
    with open(os.path.join(DATA_DIR, "desk_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    print("artifacts written to data/")


if __name__ == "__main__":
    main()
