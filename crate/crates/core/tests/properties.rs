use proptest::prelude::*;
use voxrf::identify::{estimate_binary_cov, estimate_mean_field, MeanField, ThresholdField};
use voxrf::mlmc::{delta_h2, h2, LevelEnsemble};
use voxrf::numerics::matern_rho;
use voxrf::voxelgrid::{assemble_cells, decode_volume, extract_cells, load_volume, save_volume};
use voxrf::{Axis, Dims, Smoothness, UnitCellLayout, VoxelGrid};

fn grid_strategy() -> impl Strategy<Value = VoxelGrid> {
    (1usize..7, 1usize..7, 1usize..5, 0.01f64..10.0).prop_flat_map(|(nx, ny, nz, h)| {
        prop::collection::vec(0u8..2, nx * ny * nz).prop_map(move |data| {
            VoxelGrid::new(Dims::new(nx, ny, nz), [h, 2.0 * h, 0.5 * h], data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_codec_round_trips(g in grid_strategy()) {
        let text = g.meta().to_text();
        prop_assert_eq!(&decode_volume(&text, g.as_bytes()).unwrap(), &g);
        let dir = tempfile::tempdir().unwrap();
        let (m, r) = (dir.path().join("v.toml"), dir.path().join("v.raw"));
        save_volume(&g, &m, &r).unwrap();
        prop_assert_eq!(load_volume(&m, &r).unwrap(), g);
    }

    #[test]
    fn cells_reassemble(
        cell in (1usize..4, 1usize..4, 1usize..3),
        reps in (1usize..4, 1usize..4, 1usize..3),
        seed in any::<u64>(),
    ) {
        let cd = Dims::new(cell.0, cell.1, cell.2);
        let gd = Dims::new(cell.0 * reps.0, cell.1 * reps.1, cell.2 * reps.2);
        let g = VoxelGrid::from_fn(gd, |i, j, k| {
            (seed ^ (i as u64 * 31 + j as u64 * 17 + k as u64 * 7)).count_ones() % 2 == 0
        });
        let layout = UnitCellLayout::new(cd, gd).unwrap();
        let cells = extract_cells(&g, &layout).unwrap();
        prop_assert_eq!(cells.len(), reps.0 * reps.1 * reps.2);
        prop_assert_eq!(assemble_cells(&cells, &layout).unwrap(), g);
    }

    #[test]
    fn delta_h2_is_difference_of_variances(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..60),
    ) {
        let (fine, coarse): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let e = LevelEnsemble::new(1, fine.clone(), Some(coarse.clone())).unwrap();
        let want = h2(&fine).unwrap() - h2(&coarse).unwrap();
        let scale = h2(&fine).unwrap().abs() + h2(&coarse).unwrap().abs() + 1e-300;
        prop_assert!((delta_h2(&e).unwrap() - want).abs() <= 1e-12 * scale);
    }

    #[test]
    fn thresholds_round_trip_with_sentinels(
        vals in prop::collection::vec(
            prop_oneof![
                Just(f64::INFINITY),
                Just(f64::NEG_INFINITY),
                -8.0f64..8.0,
            ],
            12,
        ),
    ) {
        let t = ThresholdField::new(Dims::new(3, 2, 2), vals).unwrap();
        let back = ThresholdField::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn covariance_estimate_ignores_cell_order(seed in any::<u64>(), rot in 1usize..9) {
        let cd = Dims::new(6, 5, 1);
        let cells: Vec<VoxelGrid> = (0..9u64)
            .map(|c| {
                VoxelGrid::from_fn(cd, |i, j, _| {
                    let h = seed
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(c * 1442695040888963407 + (i * 7 + j * 13) as u64);
                    (h >> 33) % 3 != 0 || i == 0
                })
            })
            .collect();
        let mean = estimate_mean_field(&cells).unwrap();
        let mut shuffled = cells.clone();
        shuffled.rotate_left(rot);
        shuffled.swap(0, 8 - rot.min(8));
        prop_assert_eq!(estimate_mean_field(&shuffled).unwrap(), mean.clone());
        for axis in [Axis::X, Axis::Y] {
            match (
                estimate_binary_cov(&cells, &mean, axis, 3),
                estimate_binary_cov(&shuffled, &mean, axis, 3),
            ) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "estimates disagree on success"),
            }
        }
    }

    #[test]
    fn matern_is_a_decreasing_correlation(l in 0.2f64..50.0, nu in 0.05f64..15.0) {
        let mut prev = 1.0;
        prop_assert_eq!(matern_rho(0.0, l, Smoothness::Matern(nu)).unwrap(), 1.0);
        for lag in 1..40 {
            let r = matern_rho(lag as f64, l, Smoothness::Matern(nu)).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r <= prev + 1e-15);
            prev = r;
        }
    }
}

#[test]
fn mean_field_json_round_trip() {
    let m = MeanField::new(Dims::new(2, 2, 1), vec![0.0, 0.25, 1.0, 0.5]).unwrap();
    assert_eq!(MeanField::from_json(&m.to_json()).unwrap(), m);
}
