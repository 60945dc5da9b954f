//! Closed-form cost of the global and windowed attention decoders.
//!
//! `h2 x w2` is the key/value map, `c` the attention width, `k` the
//! projection kernel, `n` the upsample ratio and `m2` the key/value window.
//! FLOPs count a multiply-accumulate as 2; memory counts elements of the
//! q, k, v and attention-weight buffers.

use crate::error::{Result, WauError};

fn positive(name: &'static str, vals: &[u64]) -> Result<()> {
    if vals.contains(&0) {
        return Err(WauError::contract(name, "all dimensions must be positive"));
    }
    Ok(())
}

/// Checked product of all factors.
fn prod(name: &'static str, factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(WauError::Overflow(name))
}

fn sum(name: &'static str, a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or(WauError::Overflow(name))
}

/// Projection term shared by both variants: `2 H2W2 C^2 k^2 (n^2 + 1)`.
pub fn projection_flops(h2: u64, w2: u64, c: u64, k: u64, n: u64) -> Result<u64> {
    let n2p1 = prod("projection flops", &[n, n])?
        .checked_add(1)
        .ok_or(WauError::Overflow("projection flops"))?;
    prod("projection flops", &[2, h2, w2, c, c, k, k, n2p1])
}

pub fn flops_ad(h2: u64, w2: u64, c: u64, k: u64, n: u64) -> Result<u64> {
    positive("flops_ad", &[h2, w2, c, k, n])?;
    let tokens = prod("flops_ad", &[h2, w2])?;
    let attn = prod("flops_ad", &[2, tokens, tokens, c, n, n])?;
    sum("flops_ad", projection_flops(h2, w2, c, k, n)?, attn)
}

pub fn flops_wad(h2: u64, w2: u64, c: u64, k: u64, n: u64, m2: u64) -> Result<u64> {
    positive("flops_wad", &[h2, w2, c, k, n, m2])?;
    let attn = prod("flops_wad", &[2, h2, w2, c, n, n, m2, m2])?;
    sum("flops_wad", projection_flops(h2, w2, c, k, n)?, attn)
}

fn qkv_elems(name: &'static str, h2: u64, w2: u64, c: u64, n: u64) -> Result<u64> {
    let n2p2 = prod(name, &[n, n])?.checked_add(2).ok_or(WauError::Overflow(name))?;
    prod(name, &[h2, w2, c, n2p2])
}

pub fn mem_ad(h2: u64, w2: u64, c: u64, n: u64) -> Result<u64> {
    positive("mem_ad", &[h2, w2, c, n])?;
    let tokens = prod("mem_ad", &[h2, w2])?;
    let weights = prod("mem_ad", &[n, n, tokens, tokens])?;
    sum("mem_ad", qkv_elems("mem_ad", h2, w2, c, n)?, weights)
}

pub fn mem_wad(h2: u64, w2: u64, c: u64, n: u64, m2: u64) -> Result<u64> {
    positive("mem_wad", &[h2, w2, c, n, m2])?;
    let weights = prod("mem_wad", &[n, n, m2, m2, h2, w2])?;
    sum("mem_wad", qkv_elems("mem_wad", h2, w2, c, n)?, weights)
}
