#![allow(dead_code)]

use std::path::PathBuf;

use tuneqn::{load_dataset, load_model_container, Dataset, Graph};

pub const MODELS: [&str; 2] = ["tiny_cnn", "tiny_resnet"];

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn model(name: &str) -> Graph {
    load_model_container(fixture(&format!("{name}.qtm"))).unwrap()
}

pub fn data10() -> Dataset {
    load_dataset(fixture("data10/manifest.json")).unwrap()
}

pub fn data200() -> Dataset {
    load_dataset(fixture("data200/manifest.json")).unwrap()
}

/// Minimal protobuf writer for hand-built ONNX messages.
#[derive(Default)]
pub struct Pb(pub Vec<u8>);

impl Pb {
    fn varint(&mut self, mut v: u64) {
        loop {
            let b = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                self.0.push(b);
                return;
            }
            self.0.push(b | 0x80);
        }
    }

    pub fn int(mut self, field: u64, v: i64) -> Self {
        self.varint(field << 3);
        self.varint(v as u64);
        self
    }

    pub fn bytes(mut self, field: u64, data: &[u8]) -> Self {
        self.varint(field << 3 | 2);
        self.varint(data.len() as u64);
        self.0.extend_from_slice(data);
        self
    }

    pub fn str(self, field: u64, s: &str) -> Self {
        self.bytes(field, s.as_bytes())
    }

    pub fn msg(self, field: u64, m: Pb) -> Self {
        self.bytes(field, &m.0)
    }
}

/// `ValueInfoProto` for a float tensor of the given dims (negative = symbolic).
pub fn value_info(name: &str, dims: &[i64]) -> Pb {
    let mut shape = Pb::default();
    for &d in dims {
        let dim = if d < 0 { Pb::default().str(2, "N") } else { Pb::default().int(1, d) };
        shape = shape.msg(1, dim);
    }
    let tensor_type = Pb::default().int(1, 1).msg(2, shape);
    Pb::default().str(1, name).msg(2, Pb::default().msg(1, tensor_type))
}

/// A one-node ONNX model `op(x) -> y`.
pub fn single_node_model(op: &str, dims: &[i64]) -> Vec<u8> {
    let node = Pb::default().str(1, "x").str(2, "y").str(3, "n0").str(4, op);
    let graph = Pb::default()
        .msg(1, node)
        .str(2, "g")
        .msg(11, value_info("x", dims))
        .msg(12, value_info("y", dims));
    Pb::default()
        .int(1, 7)
        .msg(7, graph)
        .msg(8, Pb::default().str(1, "").int(2, 13))
        .0
}
