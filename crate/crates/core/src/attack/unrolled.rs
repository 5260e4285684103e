use super::{box_bounds, signed_gradient, AttackConfig};
use crate::error::{invalid, Result};
use crate::nn::ModelGraph;
use crate::tensor::{Tape, Tensor, Var};

/// `k` masked PGD steps recorded on `tape` so the result is differentiable
/// with respect to `mask`.
///
/// The per-step gradient signs are computed off-tape and enter as
/// constants; the clamp passes gradient only where it did not bind. The
/// forward values match [`super::masked_pgd`] with the same settings and
/// no random start.
pub fn unrolled_masked_pgd(
    tape: &mut Tape,
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    mask: Var,
    cfg: &AttackConfig,
    k: usize,
) -> Result<Var> {
    if k == 0 {
        return Err(invalid("unrolled attack needs at least one step"));
    }
    cfg.validate()?;
    x.expect_shape(tape.value(mask)?, "unrolled masked pgd")?;
    let mut cur = tape.constant(x.clone());
    let (lo, hi) = box_bounds(tape.value(cur)?, cfg.epsilon);
    for _ in 0..k {
        let s = signed_gradient(model, tape.value(cur)?, labels)?;
        let s = tape.constant(s);
        let gated = tape.mul(mask, s)?;
        let step = tape.scale(gated, cfg.alpha)?;
        let moved = tape.add(cur, step)?;
        cur = tape.clamp_between(moved, &lo, &hi)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::masked_pgd;
    use crate::nn::build_mlp;
    use crate::tensor::{rng_uniform, Precision, Rng};

    #[test]
    fn forward_matches_masked_pgd() {
        let mut rng = Rng::new(1);
        let m = build_mlp(&[1, 4, 4], &[10], 3, &mut rng, Precision::F32).unwrap();
        let x = rng_uniform(&mut rng, &[2, 1, 4, 4]);
        let mask = rng_uniform(&mut rng, &[2, 1, 4, 4]);
        let y = [1, 2];
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.04,
            steps: 3,
            ..Default::default()
        };
        let mut tape = Tape::new(Precision::F32);
        let mv = tape.param(mask.clone());
        let out = unrolled_masked_pgd(&mut tape, &m, &x, &y, mv, &cfg, 3).unwrap();
        let reference = masked_pgd(&m, &x, &y, &mask, &cfg).unwrap();
        assert_eq!(tape.value(out).unwrap(), &reference.x_adv);
    }

    #[test]
    fn zero_mask_returns_input() {
        let mut rng = Rng::new(2);
        let m = build_mlp(&[1, 2, 2], &[4], 2, &mut rng, Precision::F64).unwrap();
        let x = rng_uniform(&mut rng, &[1, 1, 2, 2]);
        let mut tape = Tape::new(Precision::F64);
        let mv = tape.param(x.zeros_like());
        let out = unrolled_masked_pgd(&mut tape, &m, &x, &[0], mv, &AttackConfig::default(), 2).unwrap();
        assert_eq!(tape.value(out).unwrap(), &x);
        assert!(unrolled_masked_pgd(&mut tape, &m, &x, &[0], mv, &AttackConfig::default(), 0).is_err());
    }
}
