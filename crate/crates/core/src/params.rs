//! Named parameter enumeration shared by the networks, the optimizer and
//! checkpoint persistence.
//!
//! A network's gradient is represented by a value of the network's own type,
//! so `params` on the gradient lines up slot-for-slot with `params` on the
//! model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f32],
}

pub trait Parameterized {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>>;

    fn param_count(&self) -> usize {
        self.params("").iter().map(|p| p.data.len()).sum()
    }

    /// FNV-1a over the raw bits of every parameter, in enumeration order.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params("") {
            for v in p.data {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
