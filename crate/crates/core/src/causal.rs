//! Class influence maps, attention maps and the sampled BCE loss that ties
//! each 3D class region back to the pixels carrying that class.

use std::io::Write;
use std::path::Path;

use crate::diffcore::{DenseGrid, SeededRng};
use crate::error::{Error, Result};
use crate::lifting::SplatPlan;
use crate::normconv::{ChainTrace, ConvStack};
use crate::scalar::Real;

pub const BCE_EPS: f64 = 1e-7;

/// Sorted class ids that occur in `world` (empty class 0 included).
pub fn classes_present(world: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &s in world {
        seen[s as usize] = true;
    }
    (0..=255u8).filter(|&s| seen[s as usize]).collect()
}

/// Flat voxel indices of `Ω_s`.
pub fn class_region(world: &[u8], s: u8) -> Vec<usize> {
    world.iter().enumerate().filter(|(_, &v)| v == s).map(|(i, _)| i).collect()
}

/// `1_{Ω_s}` replicated over `channels`, shaped `H×W×Z×C`.
pub fn indicator<T: Real>(world: &[u8], extent: [usize; 3], s: u8, channels: usize) -> Result<DenseGrid<T>> {
    if world.len() != extent.iter().product::<usize>() {
        return Err(Error::shape("indicator: world size does not match extent"));
    }
    let [h, w, z] = extent;
    Ok(DenseGrid::from_fn(&[h, w, z, channels], |i| if world[i / channels] == s { T::one() } else { T::zero() }))
}

/// Binary mask `Y_s` from a label image.
pub fn label_mask<T: Real>(labels: &[u8], image: (usize, usize), s: u8) -> Result<DenseGrid<T>> {
    if labels.len() != image.0 * image.1 {
        return Err(Error::shape("label image size"));
    }
    DenseGrid::from_vec(&[image.0, image.1], labels.iter().map(|&l| if l == s { T::one() } else { T::zero() }).collect())
}

/// Result of pushing an indicator volume back through the conv chain; shared
/// by every view of a scene.
#[derive(Clone, Debug)]
pub struct VolumeInfluence<T> {
    pub volume: DenseGrid<T>,
    trace: ChainTrace<T>,
}

/// `g₀ = chainᵀ(1_{Ω_s} ⊗ 1_C)`.
pub fn volume_influence<T: Real>(stack: &ConvStack<T>, indicator: &DenseGrid<T>) -> Result<VolumeInfluence<T>> {
    let (volume, trace) = stack.adjoint(indicator)?;
    Ok(VolumeInfluence { volume, trace })
}

/// `∇_s = Liftᵀ g₀` for one view, shaped `U×V×C`.
pub fn influence_map<T: Real>(plan: &SplatPlan<T>, weights: &DenseGrid<T>, g0: &VolumeInfluence<T>) -> Result<DenseGrid<T>> {
    plan.gather(weights, &g0.volume)
}

/// Gradients flowing out of one view's influence map.
#[derive(Clone, Debug)]
pub struct InfluenceGrads<T> {
    pub weights: DenseGrid<T>,
    pub coords: Vec<[T; 3]>,
}

/// Backward of [`influence_map`]: returns `∂/∂ω`, `∂/∂coords` and adds
/// `∂/∂g₀` into `dg0`.
pub fn influence_map_backward<T: Real>(
    plan: &SplatPlan<T>,
    weights: &DenseGrid<T>,
    g0: &VolumeInfluence<T>,
    dmap: &DenseGrid<T>,
    dg0: &mut DenseGrid<T>,
) -> Result<InfluenceGrads<T>> {
    let grads = plan.bilinear_grads(weights, dmap, &g0.volume)?;
    plan.deposit(dmap, weights, dg0)?;
    Ok(InfluenceGrads { weights: grads.weights, coords: grads.coords })
}

/// Kernel-logit gradients from the accumulated `∂/∂g₀`.
pub fn volume_influence_backward<T: Real>(
    stack: &ConvStack<T>,
    g0: &VolumeInfluence<T>,
    dg0: &DenseGrid<T>,
) -> Result<ConvStack<T>> {
    Ok(stack.adjoint_backward(&g0.trace, dg0)?.0)
}

/// Channel mean `A_s(u, v)`.
pub fn attention<T: Real>(map: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (u, v, c) = match map.shape() {
        &[u, v, c] => (u, v, c),
        other => return Err(Error::shape(format!("gradient map must be U×V×C, got {other:?}"))),
    };
    let inv = T::one() / T::from_usize_lossy(c);
    DenseGrid::from_vec(&[u, v], map.data().chunks_exact(c).map(|px| px.iter().copied().sum::<T>() * inv).collect())
}

pub fn attention_backward<T: Real>(dattn: &DenseGrid<T>, channels: usize) -> Result<DenseGrid<T>> {
    let (u, v) = match dattn.shape() {
        &[u, v] => (u, v),
        other => return Err(Error::shape(format!("attention gradient must be U×V, got {other:?}"))),
    };
    let inv = T::one() / T::from_usize_lossy(channels);
    Ok(DenseGrid::from_fn(&[u, v, channels], |i| dattn.data()[i / channels] * inv))
}

fn clamp<T: Real>(a: T) -> (T, bool) {
    let lo = T::lit(BCE_EPS);
    let hi = T::one() - lo;
    if a < lo {
        (lo, true)
    } else if a > hi {
        (hi, true)
    } else {
        (a, false)
    }
}

/// Mean binary cross-entropy with `A` clamped to `[ε, 1 − ε]`.
pub fn bce_loss<T: Real>(attn: &DenseGrid<T>, target: &DenseGrid<T>) -> Result<T> {
    target.expect_shape(attn.shape(), "BCE target")?;
    let mut acc = T::zero();
    for (&a, &y) in attn.data().iter().zip(target.data()) {
        let (a, _) = clamp(a);
        acc += y * a.ln() + (T::one() - y) * (T::one() - a).ln();
    }
    Ok(-acc / T::from_usize_lossy(attn.len()))
}

/// `∂ bce_loss / ∂A`; zero where the clamp is active.
pub fn bce_grad<T: Real>(attn: &DenseGrid<T>, target: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    target.expect_shape(attn.shape(), "BCE target")?;
    let n = T::from_usize_lossy(attn.len());
    Ok(DenseGrid::from_fn(attn.shape(), |i| {
        let (a, clamped) = clamp(attn.data()[i]);
        if clamped {
            return T::zero();
        }
        let y = target.data()[i];
        (-(y / a) + (T::one() - y) / (T::one() - a)) / n
    }))
}

/// One class drawn uniformly from `pool`.
pub fn sample_class(rng: &mut SeededRng, pool: &[u8]) -> Result<u8> {
    if pool.is_empty() {
        return Err(Error::Precondition("causal loss needs at least one class".into()));
    }
    Ok(pool[rng.below(pool.len())])
}

/// Draws one class uniformly from `pool` and returns its loss.
pub fn causal_loss<T: Real>(
    rng: &mut SeededRng,
    pool: &[u8],
    mut per_class: impl FnMut(u8) -> Result<T>,
) -> Result<(T, u8)> {
    let s = sample_class(rng, pool)?;
    Ok((per_class(s)?, s))
}

/// Mean of the per-class losses over the whole pool.
pub fn exact_expected_loss<T: Real>(pool: &[u8], mut per_class: impl FnMut(u8) -> Result<T>) -> Result<T> {
    if pool.is_empty() {
        return Err(Error::Precondition("causal loss needs at least one class".into()));
    }
    let mut acc = T::zero();
    for &s in pool {
        acc += per_class(s)?;
    }
    Ok(acc / T::from_usize_lossy(pool.len()))
}

/// Writes a `U×V` map in `[0, 1]` as a binary 8-bit graymap (rows = `u`).
pub fn write_pgm<T: Real>(path: &Path, map: &DenseGrid<T>) -> Result<()> {
    let (u, v) = match map.shape() {
        &[u, v] => (u, v),
        other => return Err(Error::shape(format!("raster must be 2D, got {other:?}"))),
    };
    let mut bytes = format!("P5\n{v} {u}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&x| (x.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{vjp_check, FnOp};

    #[test]
    fn attention_examples() {
        let m = DenseGrid::<f64>::from_vec(&[1, 1, 2], vec![0.2, 0.6]).unwrap();
        assert!((attention(&m).unwrap().data()[0] - 0.4).abs() < 1e-15);
        let m = DenseGrid::<f64>::full(&[2, 3, 4], 0.3);
        assert!(attention(&m).unwrap().data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn bce_examples() {
        let y = DenseGrid::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l: f64 = bce_loss(&y, &y).unwrap();
        assert!((l + (1.0f64 - 1e-7).ln()).abs() <= 1e-15);
        let half = DenseGrid::full(&[2, 2], 0.5);
        assert!((bce_loss(&half, &y).unwrap() - 2f64.ln()).abs() <= 1e-15);

        let mut rng = SeededRng::new(3);
        let a = DenseGrid::from_fn(&[3, 3], |_| rng.uniform_range(0.01, 0.99));
        let t = DenseGrid::from_fn(&[3, 3], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
        let mut want = 0.0;
        for i in 0..9 {
            let (p, q) = (a.data()[i], t.data()[i]);
            want -= if q == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((bce_loss(&a, &t).unwrap() - want / 9.0).abs() <= 1e-12);
    }

    #[test]
    fn bce_gradient_matches_differences() {
        let mut rng = SeededRng::new(4);
        let a = DenseGrid::from_fn(&[3, 4], |_| rng.uniform_range(0.05, 0.95));
        let t = DenseGrid::from_fn(&[3, 4], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
        let op = FnOp::new(
            "bce",
            |x: &DenseGrid<f64>| DenseGrid::from_vec(&[1], vec![bce_loss(x, &t)?]),
            |x: &DenseGrid<f64>, g: &DenseGrid<f64>| {
                Ok(bce_grad(x, &t)?.scale(g.data()[0]))
            },
        );
        assert!(vjp_check(&op, &a, &DenseGrid::full(&[1], 1.3), 1e-6).unwrap().max_rel_error <= 1e-6);
    }

    #[test]
    fn estimator_single_and_pair() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let (l, s) = causal_loss(&mut rng, &[3], |_| Ok(0.25f64)).unwrap();
            assert_eq!((l, s), (0.25, 3));
        }
        let per = |s: u8| Ok(if s == 1 { 0.4 } else { 0.6 });
        assert_eq!(exact_expected_loss::<f64>(&[1, 2], per).unwrap(), 0.5);
        let same = exact_expected_loss::<f64>(&[0, 1, 2], |_| Ok(0.7)).unwrap();
        assert!((same - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pools_and_indicators() {
        let world = [0u8, 2, 2, 5, 0, 0, 0, 0];
        assert_eq!(classes_present(&world), vec![0, 2, 5]);
        assert_eq!(class_region(&world, 2), vec![1, 2]);
        let ind = indicator::<f64>(&world, [2, 2, 2], 2, 3).unwrap();
        assert_eq!(ind.sum(), 6.0);
        assert_eq!(ind.get(&[0, 0, 1, 2]), 1.0);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &DenseGrid::from_vec(&[2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap()).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 128, 255, 255, 0, 64]);
    }
}
