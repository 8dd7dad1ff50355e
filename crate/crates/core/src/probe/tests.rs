use super::*;
use crate::data::{synth_dataset, LatentRanges, SHAPE_CLASSES};
use crate::model::conv_tiny;

fn synthetic(count: usize, seed: u64) -> Dataset {
    synth_dataset(count, SHAPE_CLASSES, &LatentRanges::default(), seed).unwrap()
}

fn x_bins(d: &Dataset, edges: &BinEdges) -> Vec<usize> {
    edges.assign_all(&d.latents().unwrap().iter().map(|l| l.x_loc).collect::<Vec<_>>())
}

#[test]
fn x_location_is_linearly_visible_in_pixels() {
    let (train, test) = split_train_test(&synthetic(6000, 11)).unwrap();
    let xs: Vec<f64> = train.latents().unwrap().iter().map(|l| l.x_loc).collect();
    let edges = BinEdges::fit(&xs, 10).unwrap();
    let ftr = Features::flatten(&train.images).unwrap();
    let fte = Features::flatten(&test.images).unwrap();
    let err = linear_decode(&ftr, &fte, &x_bins(&train, &edges), &x_bins(&test, &edges), &DecodeOptions::default()).unwrap();
    assert!(err <= 30.0, "x from pixels: {err}%");
}

#[test]
fn report_covers_every_layer_and_latent() {
    let arch = conv_tiny([32, 32, 1]);
    let params = ModelParams::init(&arch, 3);
    let data = synthetic(1200, 5);
    let opts = ProbeOptions { seed: 2, ..ProbeOptions::default() };
    let report = run_probe(&params, &arch, &data, &opts).unwrap();
    let depths = arch.layers().len();
    assert_eq!(report.rows.len(), depths * 6);
    assert_eq!(report.chance, 90.0);
    for r in &report.rows {
        assert!((0.0..=100.0).contains(&r.error) && (0.0..=100.0).contains(&r.control));
    }
    let x = report.get(0, "x").unwrap();
    assert!(x.error < report.chance - 3.0 * report.chance_standard_error(), "{x:?}");
    let se = report.chance_standard_error();
    let worst = report.rows.iter().map(|r| (r.control - report.chance).abs()).fold(0.0, f64::max);
    assert!(worst <= 3.0 * se, "control drift {worst} vs se {se}");

    let again = run_probe(&params, &arch, &data, &opts).unwrap();
    assert_eq!(report.to_tsv(), again.to_tsv());
    let tsv = report.to_tsv();
    assert!(tsv.starts_with(REPORT_HEADER));
    assert_eq!(tsv.lines().count(), report.rows.len() + 1);
}

#[test]
fn pooled_features_keep_channels() {
    let t = Tensor::from_fn(&[2, 2, 2, 3], |i| i as f32);
    let f = Features::pooled(&t).unwrap();
    assert_eq!((f.rows, f.cols), (2, 3));
    assert_eq!(&f.data[..3], &[4.5, 5.5, 6.5]);
    let g = Features::flatten(&t).unwrap();
    assert_eq!((g.rows, g.cols), (2, 12));
}

#[test]
fn mismatched_inputs_are_contract_errors() {
    let arch = conv_tiny([32, 32, 1]);
    let params = ModelParams::init(&crate::model::conv_small([28, 28, 1]), 0);
    let data = synthetic(60, 1);
    assert!(matches!(run_probe(&params, &arch, &data, &ProbeOptions::default()), Err(Error::Contract(_))));
    let small = conv_tiny([16, 16, 1]);
    let p16 = ModelParams::init(&small, 0);
    assert!(matches!(run_probe(&p16, &small, &data, &ProbeOptions::default()), Err(Error::Contract(_))));
    let bare = Dataset::new(data.images.clone(), data.labels.clone(), None, data.split).unwrap();
    let p32 = ModelParams::init(&arch, 0);
    assert!(run_probe(&p32, &arch, &bare, &ProbeOptions::default()).is_err());
}

