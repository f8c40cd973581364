use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vfu_core::data::{generate_synthetic, make_batch_plan, vertical_partition, SampleId, VerticalSplit};
use vfu_core::metrics::auc_binary;
use vfu_core::nn::{cross_entropy_loss, kl_divergence, softmax_rows, DenseMatrix, MlpModel};
use vfu_core::runtime::{layout_from_widths, BatchKey, EmbeddingStore, PartyId};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
        .prop_map(move |data| DenseMatrix::new(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_central_differences(
        seed in 0u64..10_000,
        dims in prop::collection::vec(1usize..12, 2..4),
        rows in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = dims;
        dims.push(3);
        let mut model = MlpModel::random(&dims, &mut rng).unwrap();
        // random biases too, so no pre-activation sits exactly on the ReLU kink
        let params: Vec<f64> = (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_params(&params).unwrap();
        let x = DenseMatrix::from_fn(rows, dims[0], |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..rows).map(|r| r % 3).collect();
        let (logits, cache) = model.forward(&x).unwrap();
        let ce = cross_entropy_loss(&logits, &y).unwrap();
        let analytic = model.backward(&cache, &ce.grad).unwrap().flatten();
        let base = model.flatten_params();
        let mut probe = model.clone();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let up = cross_entropy_loss(&probe.predict(&x).unwrap(), &y).unwrap().loss;
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = cross_entropy_loss(&probe.predict(&x).unwrap(), &y).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
            prop_assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(m in matrix(4, 5)) {
        let p = softmax_rows(&m);
        for r in 0..4 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(a in matrix(3, 4), b in matrix(3, 4)) {
        prop_assert!(kl_divergence(&a, &b).unwrap().loss >= -1e-12);
        prop_assert!(kl_divergence(&a, &a).unwrap().loss.abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(0.0f64..1.0, 6..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut labels: Vec<usize> = scores.iter().zip(&flips).map(|(_, &f)| f as usize).collect();
        labels[0] = 0;
        labels[1] = 1;
        let squashed: Vec<f64> = scores.iter().map(|s| s * s * 0.5 + 0.1).collect();
        let a = auc_binary(&scores, &labels).unwrap();
        let b = auc_binary(&squashed, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let reversed: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let c = auc_binary(&reversed, &labels).unwrap();
        prop_assert!((a + c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_round_trips(d in 2usize..10, k in 1usize..4, seed in 0u64..100) {
        prop_assume!(k <= d);
        let ds = generate_synthetic(20, d, 2, seed).unwrap();
        let split = VerticalSplit::equal(d, k).unwrap();
        let parts = vertical_partition(&ds, &split, Some(k - 1)).unwrap();
        for (p, part) in parts.iter().enumerate() {
            prop_assert_eq!(part.labels().is_some(), p == k - 1);
            prop_assert_eq!(part.sample_ids(), ds.sample_ids());
        }
        for r in 0..ds.len() {
            let mut rebuilt = vec![f64::NAN; d];
            for (cols, part) in split.assignments().iter().zip(&parts) {
                for (j, &c) in cols.iter().enumerate() {
                    rebuilt[c] = part.features().get(r, j);
                }
            }
            prop_assert_eq!(&rebuilt[..], ds.features().row(r));
        }
    }

    #[test]
    fn batch_plans_cover_every_row_once(n in 1usize..300, bs in 1usize..64, epoch in 1usize..20, seed in 0u64..50) {
        let plan = make_batch_plan(n, bs, epoch, seed).unwrap();
        let mut seen: Vec<usize> = plan.batches.iter().flatten().copied().collect();
        prop_assert!(plan.batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan, make_batch_plan(n, bs, epoch, seed).unwrap());
    }

    #[test]
    fn store_round_trips_exactly(
        widths in prop::collection::vec(1usize..5, 1..4),
        records in prop::collection::vec((1u32..4, 0u32..6, 1usize..5), 1..8),
        seed in any::<u64>(),
    ) {
        let parties: Vec<(PartyId, usize)> = widths.iter().enumerate().map(|(i, &w)| (PartyId(i as u32), w)).collect();
        let layout = layout_from_widths(&parties);
        let width: usize = widths.iter().sum();
        let mut store = EmbeddingStore::new(8);
        let mut next = seed % 1000;
        for (epoch, batch, rows) in records {
            let concat = DenseMatrix::from_fn(rows, width, |r, c| {
                f64::from_bits(0x3ff0_0000_0000_0000 ^ ((seed.wrapping_mul(r as u64 + 1) ^ c as u64) & 0xffff_ffff))
            });
            let ids: Vec<SampleId> = (0..rows).map(|_| { next += 1; SampleId(next) }).collect();
            store.put(BatchKey { epoch, batch }, concat, &layout, ids).unwrap();
        }
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let back = EmbeddingStore::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &store);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, bytes.clone());
        if bytes.len() > 1 {
            let cut = &bytes[..bytes.len() - 1];
            prop_assert!(EmbeddingStore::read_from(&mut &cut[..]).is_err());
        }
    }

    #[test]
    fn removing_samples_leaves_none_behind(
        rows in prop::collection::vec(1usize..6, 1..6),
        pick in prop::collection::vec(any::<bool>(), 30),
    ) {
        let layout = layout_from_widths(&[(PartyId(0), 2), (PartyId(1), 1)]);
        let mut store = EmbeddingStore::new(8);
        let mut next = 0u64;
        let mut targets = BTreeSet::new();
        for (b, &n) in rows.iter().enumerate() {
            let ids: Vec<SampleId> = (0..n).map(|_| { next += 1; SampleId(next) }).collect();
            for id in &ids {
                if pick[(id.0 as usize) % pick.len()] {
                    targets.insert(*id);
                }
            }
            store.put(BatchKey { epoch: 1, batch: b as u32 }, DenseMatrix::zeros(n, 3), &layout, ids).unwrap();
        }
        let total: usize = rows.iter().sum();
        let removed = store.remove_samples(&targets).unwrap();
        prop_assert_eq!(removed, targets.len());
        let left: usize = store.records().map(|(_, r)| r.sample_ids.len()).sum();
        prop_assert_eq!(left, total - targets.len());
        prop_assert!(targets.iter().all(|&id| !store.contains_sample(id)));
        prop_assert!(store.records().all(|(_, r)| !r.sample_ids.is_empty() && r.concat.rows() == r.sample_ids.len()));
    }
}
