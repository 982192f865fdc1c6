//! Coordinate grids, Fourier features, the learnable stage-0 coordinate
//! embedding, and per-stage pixel tensor initialization.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{declare_linear, eq_linear};
use crate::params::{ParamStore, Session};
use crate::rng::{randn, randn_scaled};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// A pixel tensor bound to its stage geometry.
#[derive(Copy, Clone, Debug)]
pub struct PixelTensor {
    pub var: Var,
    /// Stage resolution before any folding.
    pub resolution: usize,
    /// Number of k-fold applications currently packed into channels.
    pub fold_level: usize,
}

/// Normalized coordinate grid `[1, H, W, 2]` with channels `(x', y')` and
/// `x' = (2x - (W-1)) / (W-1)`. The integer numerator makes the grid
/// exactly antisymmetric: `x'(W-1-x) == -x'(x)` bitwise.
pub fn coord_grid_normalized<T: Scalar>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(
            "coord_grid",
            format!("extent {}x{} below the 2x2 minimum", h, w),
        ));
    }
    let mut out = Tensor::zeros(&[1, h, w, 2]);
    let d = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let xn = (2 * x) as i64 - (w - 1) as i64;
            let yn = (2 * y) as i64 - (h - 1) as i64;
            d[(y * w + x) * 2] = T::from_f64(xn as f64 / (w - 1) as f64);
            d[(y * w + x) * 2 + 1] = T::from_f64(yn as f64 / (h - 1) as f64);
        }
    }
    Ok(out)
}

/// Declares the initialization parameters for one stage: the Fourier
/// basis, the stage-0 coordinate embedding table, and the projection that
/// merges the embeddings into the pixel tensor.
pub fn declare_stage_init<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    h: usize,
    w: usize,
    d: usize,
    with_embedding: bool,
) -> Result<()> {
    store.insert(&format!("{prefix}.fourier"), randn(rng, &[2, d]))?;
    if with_embedding {
        store.insert(&format!("{prefix}.embed"), randn_scaled(rng, &[1, h, w, d], 0.02))?;
    }
    let proj_in = if with_embedding { 2 * d } else { d };
    declare_linear(store, rng, &format!("{prefix}.proj"), proj_in, d)
}

/// Sine of the learned linear map of normalized coordinates.
pub fn fourier_features<T: Scalar>(sess: &mut Session<T>, prefix: &str, coords: Var) -> Result<Var> {
    let basis = sess.bind(&format!("{prefix}.fourier"))?;
    let lin = sess.tape.matmul(coords, basis)?;
    Ok(sess.tape.sin(lin))
}

/// Builds the initial pixel tensor `[N, H, W, d]` for one stage: Fourier
/// features, concatenated with the coordinate embedding on stage 0, then
/// projected to width `d`.
pub fn init_pixel_tensor<T: Scalar>(
    sess: &mut Session<T>,
    prefix: &str,
    h: usize,
    w: usize,
    batch: usize,
    with_embedding: bool,
) -> Result<Var> {
    let grid = coord_grid_normalized::<T>(h, w)?;
    let coords1 = sess.tape.constant(grid);
    let coords = sess.tape.repeat_batch(coords1, batch)?;
    let e_fo = fourier_features(sess, prefix, coords)?;
    let merged = if with_embedding {
        let table = sess.bind(&format!("{prefix}.embed"))?;
        let e_co = sess.tape.repeat_batch(table, batch)?;
        sess.tape.concat_last(e_fo, e_co)?
    } else {
        e_fo
    };
    eq_linear(sess, &format!("{prefix}.proj"), merged)
}

/// Channel reduction applied before pixel folding.
pub fn reduce_before_fold<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    eq_linear(sess, &format!("{prefix}.reduce"), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use crate::rng::seed_rng;
    use crate::tape::Tape;

    #[test]
    fn grid_endpoints_and_center() {
        let g: Tensor<f64> = coord_grid_normalized(3, 256).unwrap();
        assert_eq!(g.at(&[0, 0, 0, 0]), -1.0);
        assert_eq!(g.at(&[0, 0, 255, 0]), 1.0);
        assert_eq!(g.at(&[0, 0, 128, 0]), 1.0 / 255.0);
        assert_eq!(g.at(&[0, 1, 0, 1]), 0.0);
    }

    #[test]
    fn grid_is_exactly_antisymmetric() {
        let g: Tensor<f64> = coord_grid_normalized(7, 12).unwrap();
        for y in 0..7 {
            for x in 0..12 {
                let a = g.at(&[0, y, x, 0]);
                let b = g.at(&[0, y, 11 - x, 0]);
                assert_eq!(a, -b);
                let c = g.at(&[0, y, x, 1]);
                let d = g.at(&[0, 6 - y, x, 1]);
                assert_eq!(c, -d);
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate_extents() {
        assert!(coord_grid_normalized::<f64>(1, 8).is_err());
        assert!(coord_grid_normalized::<f64>(8, 1).is_err());
    }

    #[test]
    fn fourier_center_of_odd_grid_is_zero() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(1, "init");
        declare_stage_init(&mut store, &mut rng, "g.init0", 3, 3, 6, false).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let grid = coord_grid_normalized::<f64>(3, 3).unwrap();
        let coords = sess.tape.constant(grid);
        let f = fourier_features(&mut sess, "g.init0", coords).unwrap();
        for c in 0..6 {
            assert_eq!(tape.value(f).at(&[0, 1, 1, c]), 0.0);
        }
        for &v in tape.value(f).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn fourier_matches_scalar_oracle() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(2, "init");
        declare_stage_init(&mut store, &mut rng, "g.init0", 4, 5, 3, false).unwrap();
        let basis = store.get("g.init0.fourier").unwrap().clone();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let grid = coord_grid_normalized::<f64>(4, 5).unwrap();
        let coords = sess.tape.constant(grid.clone());
        let f = fourier_features(&mut sess, "g.init0", coords).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    let xn = grid.at(&[0, y, x, 0]);
                    let yn = grid.at(&[0, y, x, 1]);
                    let expect = (basis.at(&[0, c]) * xn + basis.at(&[1, c]) * yn).sin();
                    let got = tape.value(f).at(&[0, y, x, c]);
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stage0_embedding_has_one_vector_per_pixel() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(3, "init");
        declare_stage_init(&mut store, &mut rng, "g.init0", 16, 16, 512, true).unwrap();
        assert_eq!(store.get("g.init0.embed").unwrap().numel(), 16 * 16 * 512);
    }

    #[test]
    fn init_pixel_tensor_shapes_and_determinism() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(4, "init");
        declare_stage_init(&mut store, &mut rng, "g.init0", 4, 4, 6, true).unwrap();
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let mut sess = Session::new(&mut tape, store, Trainable::None);
            let e = init_pixel_tensor(&mut sess, "g.init0", 4, 4, 2, true).unwrap();
            assert_eq!(tape.shape(e), &[2, 4, 4, 6]);
            tape.value(e).data().to_vec()
        };
        assert_eq!(run(&store), run(&store));
    }

    #[test]
    fn reduction_of_zero_input_is_zero() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(5, "init");
        declare_linear(&mut store, &mut rng, "g.stage0.reduce", 8, 4).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let x = sess.tape.leaf(Tensor::zeros(&[1, 2, 2, 8]), false);
        let y = reduce_before_fold(&mut sess, "g.stage0", x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
