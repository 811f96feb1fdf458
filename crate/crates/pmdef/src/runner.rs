//! Parallel attack generation with a deterministic merge order.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use pmdef_core::attacks::{run_attack, AdversarialBatch, AttackConfig};
use pmdef_core::nn::Target;
use pmdef_core::Tensor;

use crate::error::Result;

/// Instances per work item. Chunk boundaries do not depend on the worker
/// count, so the merged batch is identical for any `workers`.
pub const ATTACK_CHUNK: usize = 64;

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

/// Runs `config` over `x` in fixed-size chunks spread across `workers`
/// threads and concatenates the results in input order.
pub fn run_attack_parallel(
    config: &AttackConfig,
    target: &dyn Target,
    x: &Tensor,
    truth: Option<&[usize]>,
    workers: usize,
) -> Result<AdversarialBatch> {
    let n = x.batch();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ATTACK_CHUNK)
        .map(|s| (s, (s + ATTACK_CHUNK).min(n)))
        .collect();
    if chunks.len() <= 1 || workers <= 1 {
        let parts = chunks
            .iter()
            .map(|&(s, e)| run_attack(config, target, &x.slice_batch(s, e), truth.map(|t| &t[s..e])))
            .collect::<pmdef_core::Result<Vec<_>>>()?;
        return Ok(AdversarialBatch::concat(parts)?);
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<pmdef_core::Result<AdversarialBatch>>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers.min(chunks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(s, e)) = chunks.get(i) else { break };
                let r = run_attack(config, target, &x.slice_batch(s, e), truth.map(|t| &t[s..e]));
                let failed = r.is_err();
                results.lock().expect("result lock")[i] = Some(r);
                if failed {
                    // Let the remaining workers drain quickly.
                    next.store(chunks.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut parts = Vec::with_capacity(chunks.len());
    // Chunks are claimed in order, so every chunk before a failure has a result.
    for r in results.into_inner().expect("result lock").into_iter().flatten() {
        parts.push(r?);
    }
    Ok(AdversarialBatch::concat(parts)?)
}
