//! Aggregated-token bank, projection function, adapters, and alignment loss.

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use mmp::gradcheck::finite_diff_check;
use mmp::projection::{
    alignment_loss, project, AdaptDirection, AggregatedTokenBank, DimensionAdapter,
    ProjectorParams, DEFAULT_AGGREGATED_TOKENS,
};
use mmp::{Error, MaskPattern, ModalitySpec, ParameterStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn specs(native: usize, tokens: usize) -> Vec<ModalitySpec> {
    (0..3)
        .map(|i| ModalitySpec {
            name: format!("m{i}"),
            native_width: native,
            token_count: tokens,
            feature_len: native * tokens,
        })
        .collect()
}

struct Fixture {
    specs: Vec<ModalitySpec>,
    bank: AggregatedTokenBank,
    adapter: DimensionAdapter,
    projectors: Vec<ProjectorParams>,
    store: ParameterStore,
    width: usize,
}

fn fixture(width: usize, heads: usize, k: usize, seed: u64) -> Fixture {
    let specs = specs(width, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let adapter = DimensionAdapter::init(&mut store, &specs, width, &mut rng).unwrap();
    let bank = AggregatedTokenBank::init(&mut store, &specs, width, k, heads, &mut rng).unwrap();
    let projectors = (0..3)
        .map(|i| ProjectorParams::init(&mut store, &specs, i, width, 6, heads, &mut rng).unwrap())
        .collect();
    Fixture {
        specs,
        bank,
        adapter,
        projectors,
        store,
        width,
    }
}

fn token_map(
    fx: &Fixture,
    pattern: &MaskPattern,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<usize, Tensor> {
    pattern
        .available()
        .iter()
        .map(|&j| {
            (
                j,
                Tensor::randn(&[fx.specs[j].token_count, fx.width], 1.0, rng),
            )
        })
        .collect()
}

// ── refresh_bank ───────────────────────────────────────────────────────

#[test]
fn masked_bank_rows_bitwise_equal_base() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 1);
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut tape = Tape::new();
    let view = fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens).unwrap();
    let base = fx.store.get("bank.m1.base").unwrap();
    assert_eq!(view[&1].data(), base.data(), "masked bank entry must be the untouched base");
}

#[test]
fn refresh_never_mutates_base_parameters() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 3);
    let before = fx.store.snapshot();
    let pattern = MaskPattern::new(3, &[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut tape = Tape::new();
    let _ = fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens).unwrap();
    let after = fx.store.snapshot();
    assert_eq!(before, after, "refresh must be functional");
}

#[test]
fn refresh_returns_eight_by_d_entries() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 5);
    let pattern = MaskPattern::new(3, &[2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut tape = Tape::new();
    let view = fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens).unwrap();
    assert_eq!(view.len(), 3);
    for entry in view.values() {
        assert_eq!(entry.shape(), &[8, 8]);
    }
}

#[test]
fn refresh_with_zero_wq_is_uniform_attention() {
    let mut fx = fixture(8, 1, DEFAULT_AGGREGATED_TOKENS, 7);
    fx.store
        .set_value("bank.update.wq", &vec![0.0; 64])
        .unwrap();
    let pattern = MaskPattern::new(3, &[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut tape = Tape::new();
    let view = fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens).unwrap();
    for &j in pattern.available() {
        let toks = &tokens[&j];
        let rows = toks.shape()[0];
        let mean: Vec<f64> = (0..8)
            .map(|c| (0..rows).map(|r| toks.at(r, c)).sum::<f64>() / rows as f64)
            .collect();
        let expect = {
            let mut t2 = Tape::new();
            let m = Tensor::new(&[1, 8], mean).unwrap();
            let wv = t2.param(&fx.store, "bank.update.wv").unwrap();
            let wo = t2.param(&fx.store, "bank.update.wo").unwrap();
            let mv = t2.matmul(&m, &wv).unwrap();
            t2.matmul(&mv, &wo).unwrap()
        };
        for row in 0..8 {
            for col in 0..8 {
                assert_abs_diff_eq!(view[&j].at(row, col), expect.at(0, col), epsilon = TOL);
            }
        }
    }
}

#[test]
fn refresh_rejects_tokens_for_masked_modality() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 9);
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tokens = token_map(&fx, &pattern, &mut rng);
    tokens.insert(1, Tensor::zeros(&[4, 8]));
    let mut tape = Tape::new();
    assert!(matches!(
        fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens),
        Err(Error::Contract(_))
    ));
}

#[test]
fn refresh_rejects_missing_available_entry() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 11);
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tokens = token_map(&fx, &pattern, &mut rng);
    tokens.remove(&2);
    let mut tape = Tape::new();
    assert!(matches!(
        fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens),
        Err(Error::Contract(_))
    ));
}

// ── project ────────────────────────────────────────────────────────────

fn run_projection(
    fx: &Fixture,
    pattern: &MaskPattern,
    target: usize,
    tokens: &BTreeMap<usize, Tensor>,
) -> mmp::ProjectionTrace<f64> {
    let mut tape = Tape::new();
    let view = fx.bank.refresh(&mut tape, &fx.store, pattern, tokens).unwrap();
    project(
        &mut tape,
        &fx.store,
        &fx.specs,
        &view,
        &fx.projectors[target],
        &fx.adapter,
        target,
        pattern,
        tokens,
    )
    .unwrap()
}

#[test]
fn projected_tokens_have_native_shape() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 13);
    let pattern = MaskPattern::new(3, &[0, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tokens = token_map(&fx, &pattern, &mut rng);
    for &target in pattern.masked() {
        let trace = run_projection(&fx, &pattern, target, &tokens);
        assert_eq!(trace.projected.shape(), &[4, 8]);
        assert_eq!(trace.concatenated.shape(), &[8, 8]); // two non-target slots of 4 rows
    }
}

#[test]
fn single_source_occupies_its_slot_others_zero() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 15);
    let pattern = MaskPattern::new(3, &[0, 2]).unwrap(); // only m1 available
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let trace = run_projection(&fx, &pattern, 0, &tokens);
    // Slots for target 0 are [m1, m2]; m2 is masked so its 4 rows are zero.
    let att = &trace.attended[&1];
    for row in 0..4 {
        for col in 0..8 {
            assert_abs_diff_eq!(trace.concatenated.at(row, col), att.at(row, col), epsilon = TOL);
            assert_abs_diff_eq!(trace.concatenated.at(row + 4, col), 0.0, epsilon = TOL);
        }
    }
}

#[test]
fn projection_independent_of_token_map_iteration_order() {
    // BTreeMap fixes iteration order; equality of two separately assembled
    // maps with identical content is the observable contract.
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 17);
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut reversed = BTreeMap::new();
    for (&k, v) in tokens.iter().rev() {
        reversed.insert(k, v.clone());
    }
    let a = run_projection(&fx, &pattern, 1, &tokens);
    let b = run_projection(&fx, &pattern, 1, &reversed);
    assert_eq!(a.projected.data(), b.projected.data());
}

#[test]
fn zeroing_an_already_zero_slot_changes_nothing() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 19);
    let pattern = MaskPattern::new(3, &[0, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let a = run_projection(&fx, &pattern, 0, &tokens);
    let b = run_projection(&fx, &pattern, 0, &tokens);
    assert_eq!(a.projected.data(), b.projected.data());
    assert_eq!(a.concatenated.data(), b.concatenated.data());
}

#[test]
fn project_rejects_unmasked_target() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 21);
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tokens = token_map(&fx, &pattern, &mut rng);
    let mut tape = Tape::new();
    let view = fx.bank.refresh(&mut tape, &fx.store, &pattern, &tokens).unwrap();
    assert!(matches!(
        project(
            &mut tape,
            &fx.store,
            &fx.specs,
            &view,
            &fx.projectors[0],
            &fx.adapter,
            0,
            &pattern,
            &tokens,
        ),
        Err(Error::Contract(_))
    ));
}

#[test]
fn full_pipeline_gradient_check() {
    // M=3, N=4, d=8, K=8, H=2: bank + projector + adapters end to end.
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 23);
    let mut store = fx.store;
    let pattern = MaskPattern::new(3, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let tokens: BTreeMap<usize, Tensor> = pattern
        .available()
        .iter()
        .map(|&j| (j, Tensor::randn(&[4, 8], 1.0, &mut rng)))
        .collect();
    let real = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let bank = fx.bank;
    let specs_v = fx.specs;
    let projector = &fx.projectors[1];
    let adapter = fx.adapter;
    let f = |s: &ParameterStore| {
        let mut tape = Tape::new();
        let view = bank.refresh(&mut tape, s, &pattern, &tokens)?;
        let trace = project(
            &mut tape, s, &specs_v, &view, projector, &adapter, 1, &pattern, &tokens,
        )?;
        let loss = tape.smooth_l1(&trace.projected, &real, 1.0)?;
        Ok(loss.item().unwrap())
    };
    {
        let mut tape = Tape::new();
        let view = bank.refresh(&mut tape, &store, &pattern, &tokens).unwrap();
        let trace = project(
            &mut tape, &store, &specs_v, &view, projector, &adapter, 1, &pattern, &tokens,
        )
        .unwrap();
        let loss = tape.smooth_l1(&trace.projected, &real, 1.0).unwrap();
        tape.backward(&loss, &mut store).unwrap();
    }
    let err = finite_diff_check(f, &mut store, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

// ── alignment loss ─────────────────────────────────────────────────────

#[test]
fn alignment_zero_when_projected_equals_real() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let t0 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut projected = BTreeMap::new();
    let mut real = BTreeMap::new();
    projected.insert(0usize, t0.clone());
    real.insert(0usize, t0);
    let loss = alignment_loss(&mut tape, &projected, &real).unwrap();
    assert_abs_diff_eq!(loss.item().unwrap(), 0.0, epsilon = TOL);
}

#[test]
fn alignment_averages_per_modality_losses() {
    // Two masked modalities with individual losses a and b give (a+b)/2.
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let p0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let r0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let p1 = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let r1 = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let single = |p: &Tensor, r: &Tensor| {
        let mut tape = Tape::new();
        tape.smooth_l1(p, r, 1.0).unwrap().item().unwrap()
    };
    let a = single(&p0, &r0);
    let b = single(&p1, &r1);
    let mut tape = Tape::new();
    let mut projected = BTreeMap::new();
    let mut real = BTreeMap::new();
    projected.insert(0usize, p0);
    projected.insert(1usize, p1);
    real.insert(0usize, r0);
    real.insert(1usize, r1);
    let loss = alignment_loss(&mut tape, &projected, &real).unwrap();
    assert_abs_diff_eq!(loss.item().unwrap(), (a + b) / 2.0, epsilon = TOL);
}

#[test]
fn alignment_empty_maps_zero() {
    let mut tape = Tape::new();
    let loss = alignment_loss(&mut tape, &BTreeMap::new(), &BTreeMap::new()).unwrap();
    assert_abs_diff_eq!(loss.item().unwrap(), 0.0, epsilon = TOL);
}

#[test]
fn alignment_key_mismatch_rejected() {
    let mut tape = Tape::new();
    let mut projected = BTreeMap::new();
    projected.insert(0usize, Tensor::zeros(&[2, 2]));
    let mut real = BTreeMap::new();
    real.insert(1usize, Tensor::zeros(&[2, 2]));
    assert!(matches!(
        alignment_loss(&mut tape, &projected, &real),
        Err(Error::Contract(_))
    ));
}

#[test]
fn alignment_nonnegative_and_zero_iff_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let p = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let mut q = p.clone();
    q.data_mut()[4] += 0.25;
    let mut projected = BTreeMap::new();
    let mut real = BTreeMap::new();
    projected.insert(0usize, p);
    real.insert(0usize, q);
    let mut tape = Tape::new();
    let loss = alignment_loss(&mut tape, &projected, &real).unwrap();
    assert!(loss.item().unwrap() > 0.0);
}

// ── adapters ───────────────────────────────────────────────────────────

#[test]
fn adapter_identity_when_widths_match() {
    let fx = fixture(8, 2, DEFAULT_AGGREGATED_TOKENS, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let tokens = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let out = fx
        .adapter
        .adapt(&mut tape, &fx.store, 0, &tokens, AdaptDirection::ToCommon)
        .unwrap();
    for (a, b) in out.data().iter().zip(tokens.data()) {
        assert_abs_diff_eq!(a, b, epsilon = TOL);
    }
}

#[test]
fn adapter_swaps_width_preserves_rows() {
    let specs = vec![
        ModalitySpec {
            name: "m0".into(),
            native_width: 6,
            token_count: 5,
            feature_len: 30,
        },
        ModalitySpec {
            name: "m1".into(),
            native_width: 10,
            token_count: 2,
            feature_len: 20,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParameterStore::new();
    let adapter = DimensionAdapter::init(&mut store, &specs, 8, &mut rng).unwrap();
    let mut tape = Tape::new();
    let native = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let common = adapter
        .adapt(&mut tape, &store, 0, &native, AdaptDirection::ToCommon)
        .unwrap();
    assert_eq!(common.shape(), &[5, 8]);
    let back = adapter
        .adapt(&mut tape, &store, 0, &common, AdaptDirection::ToNative)
        .unwrap();
    assert_eq!(back.shape(), &[5, 6]);
    assert!(matches!(
        adapter.adapt(&mut tape, &store, 1, &native, AdaptDirection::ToCommon),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn adapter_gradient_check() {
    let specs = vec![ModalitySpec {
        name: "m0".into(),
        native_width: 5,
        token_count: 3,
        feature_len: 15,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParameterStore::new();
    let adapter = DimensionAdapter::init(&mut store, &specs, 4, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let f = |s: &ParameterStore| {
        let mut tape = Tape::new();
        let y = adapter.adapt(&mut tape, s, 0, &x, AdaptDirection::ToCommon)?;
        Ok(tape.sum_all(&y).item().unwrap())
    };
    {
        let mut tape = Tape::new();
        let y = adapter
            .adapt(&mut tape, &store, 0, &x, AdaptDirection::ToCommon)
            .unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss, &mut store).unwrap();
    }
    let err = finite_diff_check(f, &mut store, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
