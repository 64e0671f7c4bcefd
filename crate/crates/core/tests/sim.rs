mod common;

use common::{bits, matrix, naive_dequant, random_caps, random_dims, raw_sb, rng, weights};
use fbfq_core::codec::{SuperBlockFormat, Variant};
use fbfq_core::driver::{plan_tiles, AccelCaps, Driver, LayerDims};
use fbfq_core::isa::build_program;
use fbfq_core::kernels::{matmul_bfq_quantized, quantize_input, vec_dot_row};
use fbfq_core::sim::{
    bit_slice_sb, estimate_cycles, sb_dot, CacheEntry, SbKind, SimConfig, Simulator,
};

fn slice_weight(raw: &[u8], v: Variant) -> fbfq_core::sim::WeightEntry {
    match bit_slice_sb(raw, v, SbKind::Weight).unwrap() {
        CacheEntry::Weight(w) => w,
        CacheEntry::Input(_) => panic!("weight expected"),
    }
}

fn slice_input(raw: &[u8]) -> fbfq_core::sim::InputEntry {
    match bit_slice_sb(raw, Variant::Q8K, SbKind::Input).unwrap() {
        CacheEntry::Input(x) => x,
        CacheEntry::Weight(_) => panic!("input expected"),
    }
}

#[test]
fn sliced_superblocks_decode_like_the_codec() {
    let mut r = rng(1);
    for v in [Variant::Q2K, Variant::Q3K] {
        for _ in 0..300 {
            let raw = raw_sb(&mut r, v);
            let got: Vec<u32> = slice_weight(&raw, v)
                .dequantize()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let want: Vec<u32> = naive_dequant(&raw, v).iter().map(|x| x.to_bits()).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn dsbp_matches_fused_kernel_bitwise() {
    let mut r = rng(2);
    for v in [Variant::Q2K, Variant::Q3K] {
        for _ in 0..500 {
            let w = weights(&mut r, 1, 256, v);
            let x = quantize_input(&matrix(&mut r, 256, 1)).unwrap();
            let want = vec_dot_row(w.row(0), x.column(0)).unwrap();
            let wr = w.row(0).to_bytes();
            let got = sb_dot(
                &slice_weight(&wr, v),
                &slice_input(&x.column(0)[0].to_bytes()),
            );
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }
}

#[test]
fn fifo_count_does_not_change_results() {
    let mut r = rng(3);
    let dims = LayerDims::new(6, 1024, 5).unwrap();
    let w = weights(&mut r, dims.m, dims.k, Variant::Q3K);
    let x = quantize_input(&matrix(&mut r, dims.k, dims.n)).unwrap();
    let mut reference = None;
    for n_fifos in 1..=7 {
        let caps = AccelCaps {
            n_fifos,
            ..AccelCaps::default()
        };
        let mut d = Driver::new(Simulator::new(SimConfig::with_caps(caps)).unwrap());
        let y = bits(&d.run_matmul_quantized(&w, &x).unwrap());
        assert_eq!(reference.get_or_insert_with(|| y.clone()), &y);
    }
}

#[test]
fn identical_runs_are_identical() {
    let mut r = rng(4);
    let dims = LayerDims::new(9, 768, 7).unwrap();
    let w = weights(&mut r, dims.m, dims.k, Variant::Q2K);
    let x = quantize_input(&matrix(&mut r, dims.k, dims.n)).unwrap();
    let caps = AccelCaps {
        weight_cache_sb: 4,
        input_cache_sb: 8,
        n_fifos: 2,
        out_buf_elems: 16,
    };
    let run = || {
        let mut d = Driver::new(Simulator::new(SimConfig::with_caps(caps)).unwrap());
        let y = d.run_matmul_quantized(&w, &x).unwrap();
        (bits(&y), d.sim().cycle_report())
    };
    assert_eq!(run(), run());
}

#[test]
fn one_simulator_switches_variants_without_reset() {
    let mut r = rng(5);
    let mut sim = Simulator::new(SimConfig::default()).unwrap();
    for i in 0..30 {
        let v = if i % 2 == 0 {
            Variant::Q2K
        } else {
            Variant::Q3K
        };
        let dims = random_dims(&mut r, 12, 12, 6);
        let w = weights(&mut r, dims.m, dims.k, v);
        let x = quantize_input(&matrix(&mut r, dims.k, dims.n)).unwrap();
        let mut d = Driver::new(sim);
        let y = d.run_matmul_quantized(&w, &x).unwrap();
        assert_eq!(bits(&y), bits(&matmul_bfq_quantized(&w, &x).unwrap()));
        sim = d.into_sim();
        assert_eq!(sim.pending_output(), 0);
    }
}

#[test]
fn estimator_agrees_with_event_counts() {
    let mut r = rng(6);
    for i in 0..80 {
        let dims = random_dims(&mut r, 12, 12, 6);
        let caps = random_caps(&mut r);
        let config = SimConfig {
            caps,
            lanes: [1, 2, 4, 8, 16][i % 5],
            words_in_per_cycle: 1 + i % 3,
            words_out_per_cycle: 1 + i % 2,
            ..SimConfig::default()
        };
        let v = if i % 2 == 0 {
            Variant::Q2K
        } else {
            Variant::Q3K
        };
        let w = weights(&mut r, dims.m, dims.k, v);
        let x = quantize_input(&matrix(&mut r, dims.k, dims.n)).unwrap();
        let plan = plan_tiles(dims, caps).unwrap();
        let mut sim = Simulator::new(config).unwrap();
        sim.ingest(build_program(&plan, &w, &x).unwrap().words())
            .unwrap();
        assert_eq!(
            sim.cycle_report(),
            estimate_cycles(&plan, dims, v, &config).unwrap()
        );
    }
}

#[test]
fn totals_grow_with_every_dimension() {
    let config = SimConfig::default();
    let total = |m, k, n| {
        let dims = LayerDims::new(m, k, n).unwrap();
        let plan = plan_tiles(dims, config.caps).unwrap();
        estimate_cycles(&plan, dims, Variant::Q2K, &config)
            .unwrap()
            .cycles_total()
    };
    for base in [(1, 256, 1), (4, 512, 3), (9, 1024, 7)] {
        let (m, k, n) = base;
        let t = total(m, k, n);
        assert!(total(m + 1, k, n) >= t);
        assert!(total(m, k + 256, n) >= t);
        assert!(total(m, k, n + 1) >= t);
    }
}

#[test]
fn halving_lanes_doubles_vector_cycles() {
    let dims = LayerDims::new(8, 2048, 8).unwrap();
    let plan = plan_tiles(dims, AccelCaps::default()).unwrap();
    let vector = |lanes| {
        let config = SimConfig {
            lanes,
            ..SimConfig::default()
        };
        estimate_cycles(&plan, dims, Variant::Q3K, &config)
            .unwrap()
            .cycles_vector
    };
    for lanes in [1, 2, 4, 8] {
        assert_eq!(vector(lanes), 2 * vector(2 * lanes));
    }
}
