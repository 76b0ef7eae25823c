#!/usr/bin/env python3
"""Regenerates the test fixtures under fixtures/.

Trains two tiny CNN classifiers on a synthetic 4-class 3x8x8 pattern task and
writes every model both as a QTM container and as an ONNX file from the same
weights. Also writes two QTD datasets and ONNX Runtime reference outputs used
to cross-check the Rust interpreter.

Requires: numpy, torch, onnx, onnxruntime.
"""

import json
import os
import struct

import numpy as np
import onnx
import onnxruntime as ort
import torch
import torch.nn as nn
from onnx import TensorProto, helper, numpy_helper

HERE = os.path.dirname(os.path.abspath(__file__))
NUM_CLASSES = 4
DTYPE_CODES = {np.float32: 0, np.int8: 1, np.uint8: 2, np.int32: 3, np.int64: 4}
DTYPE_NAMES = {np.float32: "f32", np.int8: "i8", np.uint8: "u8", np.int32: "i32", np.int64: "i64"}


# --------------------------------------------------------------------------
# synthetic data


def make_samples(n, rng, noise=0.55):
    xs = np.zeros((n, 3, 8, 8), dtype=np.float32)
    ys = np.zeros(n, dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    for k in range(n):
        label = int(rng.integers(0, NUM_CLASSES))
        phase = int(rng.integers(0, 2))
        if label == 0:
            pattern = ((ii + phase) % 2).astype(np.float32)
        elif label == 1:
            pattern = ((jj + phase) % 2).astype(np.float32)
        elif label == 2:
            pattern = (((ii + jj + phase) % 3) == 0).astype(np.float32)
        else:
            c = int(rng.integers(2, 5))
            pattern = ((abs(ii - c) <= 1) & (abs(jj - c) <= 1)).astype(np.float32)
        colour = rng.uniform(0.5, 1.5, size=3).astype(np.float32)
        img = colour[:, None, None] * pattern[None, :, :]
        img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        xs[k] = img
        ys[k] = label
    return xs, ys


# --------------------------------------------------------------------------
# models


class TinyCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.fc = nn.Linear(8 * 4 * 4, NUM_CLASSES)

    def forward(self, x):
        x = torch.relu(self.conv1(x))
        x = nn.functional.max_pool2d(x, 2, 2)
        x = torch.flatten(x, 1)
        return self.fc(x)


class TinyResnet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(8)
        self.conv2 = nn.Conv2d(8, 8, 3, padding=1)
        self.conv3 = nn.Conv2d(8, 16, 3, padding=1)
        self.fc1 = nn.Linear(16, 32, bias=False)
        self.fc2 = nn.Linear(32, NUM_CLASSES)

    def forward(self, x):
        a = torch.relu(self.bn1(self.conv1(x)))
        b = torch.relu(self.conv2(a))
        x = a + b
        x = nn.functional.avg_pool2d(x, 2, 2)
        x = torch.clamp(self.conv3(x), 0.0, 6.0)
        x = x.mean(dim=(2, 3))
        x = torch.relu(self.fc1(x))
        return self.fc2(x)


def train(model, xs, ys, steps=600, seed=0):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=0.01)
    xt = torch.from_numpy(xs)
    yt = torch.from_numpy(ys)
    g = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, xs.shape[0], (64,), generator=g)
        opt.zero_grad()
        loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model(xt).argmax(1) == yt).float().mean().item()
    return acc


def f32(t):
    return t.detach().numpy().astype(np.float32).copy()


# --------------------------------------------------------------------------
# portable graph description shared by the two writers


class Net:
    def __init__(self, name, opset):
        self.name = name
        self.opset = opset
        self.input = ("input", [None, 3, 8, 8])
        self.output = None
        self.nodes = []

    def node(self, id_, op, inputs, outputs, attrs=None, weights=None):
        self.nodes.append(
            {
                "id": id_,
                "op": op,
                "inputs": inputs,
                "outputs": outputs,
                "attrs": attrs or {},
                "weights": weights or {},
            }
        )


def tiny_cnn_net(m):
    net = Net("tiny_cnn", 11)
    net.node(
        "conv1",
        "Conv",
        ["input", "conv1.weight", "conv1.bias"],
        ["conv1_out"],
        {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [1, 1]},
        {"conv1.weight": f32(m.conv1.weight), "conv1.bias": f32(m.conv1.bias)},
    )
    net.node("relu1", "Relu", ["conv1_out"], ["relu1_out"])
    net.node(
        "pool1",
        "MaxPool",
        ["relu1_out"],
        ["pool1_out"],
        {"kernel_shape": [2, 2], "strides": [2, 2]},
    )
    net.node("flatten", "Flatten", ["pool1_out"], ["flatten_out"], {"axis": 1})
    net.node(
        "fc",
        "Gemm",
        ["flatten_out", "fc.weight", "fc.bias"],
        ["logits"],
        {"alpha": 1.0, "beta": 1.0, "transB": 1},
        {"fc.weight": f32(m.fc.weight), "fc.bias": f32(m.fc.bias)},
    )
    net.node("softmax", "Softmax", ["logits"], ["probs"], {"axis": 1})
    net.output = "probs"
    return net


def tiny_resnet_net(m):
    net = Net("tiny_resnet", 13)
    bn = m.bn1
    net.node(
        "conv1",
        "Conv",
        ["input", "conv1.weight", "conv1.bias"],
        ["conv1_out"],
        {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1]},
        {"conv1.weight": f32(m.conv1.weight), "conv1.bias": f32(m.conv1.bias)},
    )
    net.node(
        "bn1",
        "BatchNormalization",
        ["conv1_out", "bn1.scale", "bn1.bias", "bn1.mean", "bn1.var"],
        ["bn1_out"],
        {"epsilon": float(np.float32(bn.eps))},
        {
            "bn1.scale": f32(bn.weight),
            "bn1.bias": f32(bn.bias),
            "bn1.mean": f32(bn.running_mean),
            "bn1.var": f32(bn.running_var),
        },
    )
    net.node("relu1", "Relu", ["bn1_out"], ["relu1_out"])
    net.node(
        "conv2",
        "Conv",
        ["relu1_out", "conv2.weight", "conv2.bias"],
        ["conv2_out"],
        {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "group": 1},
        {"conv2.weight": f32(m.conv2.weight), "conv2.bias": f32(m.conv2.bias)},
    )
    net.node("relu2", "Relu", ["conv2_out"], ["relu2_out"])
    net.node("add1", "Add", ["relu1_out", "relu2_out"], ["add1_out"])
    net.node(
        "pool1",
        "AveragePool",
        ["add1_out"],
        ["pool1_out"],
        {"kernel_shape": [2, 2], "strides": [2, 2]},
    )
    net.node(
        "conv3",
        "Conv",
        ["pool1_out", "conv3.weight", "conv3.bias"],
        ["conv3_out"],
        {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1]},
        {"conv3.weight": f32(m.conv3.weight), "conv3.bias": f32(m.conv3.bias)},
    )
    net.node(
        "clip1",
        "Clip",
        ["conv3_out", "clip1.min", "clip1.max"],
        ["clip1_out"],
        {},
        {
            "clip1.min": np.array(0.0, dtype=np.float32),
            "clip1.max": np.array(6.0, dtype=np.float32),
        },
    )
    net.node("gap", "GlobalAveragePool", ["clip1_out"], ["gap_out"])
    net.node(
        "reshape",
        "Reshape",
        ["gap_out", "reshape.shape"],
        ["reshape_out"],
        {},
        {"reshape.shape": np.array([-1, 16], dtype=np.int64)},
    )
    net.node(
        "fc1",
        "MatMul",
        ["reshape_out", "fc1.weight"],
        ["fc1_out"],
        {},
        # torch Linear stores [out, in]; MatMul wants [in, out]
        {"fc1.weight": np.ascontiguousarray(f32(m.fc1.weight).T)},
    )
    net.node("relu3", "Relu", ["fc1_out"], ["relu3_out"])
    net.node(
        "fc2",
        "Gemm",
        ["relu3_out", "fc2.weight", "fc2.bias"],
        ["logits"],
        {"transB": 1},
        {"fc2.weight": f32(m.fc2.weight), "fc2.bias": f32(m.fc2.bias)},
    )
    net.node("softmax", "Softmax", ["logits"], ["probs"], {"axis": -1})
    net.output = "probs"
    return net


# --------------------------------------------------------------------------
# writers


def attr_json(v):
    if isinstance(v, bool):
        return {"int": int(v)}
    if isinstance(v, int):
        return {"int": v}
    if isinstance(v, float):
        return {"float": float(np.float32(v))}
    if isinstance(v, str):
        return {"string": v}
    return {"ints": [int(x) for x in v]}


def write_qtm(net, path):
    blob = bytearray()
    nodes = []
    for n in net.nodes:
        weights = []
        for wname in sorted(n["weights"]):
            # ascontiguousarray would promote 0-d scalars to shape [1]
            arr = np.array(n["weights"][wname], order="C")
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            weights.append(
                {
                    "name": wname,
                    "dtype": DTYPE_NAMES[arr.dtype.type],
                    "shape": list(arr.shape),
                    "offset": len(blob),
                    "length": len(raw),
                }
            )
            blob.extend(raw)
        nodes.append(
            {
                "id": n["id"],
                "op": n["op"],
                "inputs": n["inputs"],
                "outputs": n["outputs"],
                "attrs": {k: attr_json(v) for k, v in sorted(n["attrs"].items())},
                "weights": weights,
            }
        )
    name, shape = net.input
    header = {
        "name": net.name,
        "opset": net.opset,
        "inputs": [
            {"name": name, "dtype": "f32", "shape": ["N" if d is None else d for d in shape]}
        ],
        "outputs": [net.output],
        "nodes": nodes,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"QTMODEL1")
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(bytes(blob))


def write_onnx(net, path):
    nodes = []
    inits = []
    for n in net.nodes:
        attrs = {}
        for k, v in n["attrs"].items():
            attrs[k] = float(np.float32(v)) if isinstance(v, float) else v
        nodes.append(
            helper.make_node(n["op"], n["inputs"], n["outputs"], name=n["id"], **attrs)
        )
        for wname, arr in n["weights"].items():
            inits.append(numpy_helper.from_array(arr, wname))
    name, shape = net.input
    inp = helper.make_tensor_value_info(
        name, TensorProto.FLOAT, ["N" if d is None else d for d in shape]
    )
    out = helper.make_tensor_value_info(net.output, TensorProto.FLOAT, ["N", NUM_CLASSES])
    graph = helper.make_graph(nodes, net.name, [inp], [out], initializer=inits)
    model = helper.make_model(
        graph,
        producer_name="fixtures/generate.py",
        opset_imports=[helper.make_opsetid("", net.opset)],
    )
    model.ir_version = 7
    onnx.checker.check_model(model)
    onnx.save(model, path)


def write_tensor(arr, path):
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(b"QTTENSOR")
        f.write(struct.pack("<B", DTYPE_CODES[arr.dtype.type]))
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def write_dataset(name, xs, ys, root):
    os.makedirs(root, exist_ok=True)
    samples = []
    for k in range(xs.shape[0]):
        fname = "s%03d.qtt" % k
        write_tensor(xs[k], os.path.join(root, fname))
        samples.append({"tensor": fname, "label": int(ys[k])})
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump({"name": name, "samples": samples}, f, indent=2)
        f.write("\n")


def main():
    rng = np.random.default_rng(20240611)
    train_x, train_y = make_samples(4000, rng)
    data10_x, data10_y = make_samples(10, rng)
    data200_x, data200_y = make_samples(200, rng)

    cnn = TinyCnn()
    acc = train(cnn, train_x, train_y, seed=1)
    print("tiny_cnn train accuracy %.3f" % acc)
    res = TinyResnet()
    acc = train(res, train_x, train_y, seed=2)
    print("tiny_resnet train accuracy %.3f" % acc)

    write_dataset("data10", data10_x, data10_y, os.path.join(HERE, "data10"))
    write_dataset("data200", data200_x, data200_y, os.path.join(HERE, "data200"))

    expected = os.path.join(HERE, "expected")
    os.makedirs(expected, exist_ok=True)
    for net in (tiny_cnn_net(cnn), tiny_resnet_net(res)):
        qtm = os.path.join(HERE, net.name + ".qtm")
        onx = os.path.join(HERE, net.name + ".onnx")
        write_qtm(net, qtm)
        write_onnx(net, onx)
        sess = ort.InferenceSession(onx, providers=["CPUExecutionProvider"])
        probs = sess.run(None, {"input": data10_x})[0].astype(np.float32)
        write_tensor(probs, os.path.join(expected, net.name + "_data10_probs.qtt"))
        acc = (probs.argmax(1) == data10_y).mean()
        print("%s: onnxruntime accuracy on data10 %.2f" % (net.name, acc))


if __name__ == "__main__":
    main()
