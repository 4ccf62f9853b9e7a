use std::fs;
use std::path::Path;

use sbat::io::{
    cached_pe, load_checkpoint, load_dataset, read_graph, read_scale_series, read_series_bin, read_series_csv,
    save_checkpoint, write_graph, write_scale_series, write_series_bin, write_series_csv, SeriesFormat,
};
use sbat::CliError;
use sbat_core::graph::laplacian_pe;
use sbat_core::model::{ModelConfig, ModelParams};
use sbat_core::partition::build_scale_series;
use sbat_core::pipeline::{synth_diffusion, Normalizer, SynthConfig};
use sbat_core::Tensor;
use tempfile::tempdir;

fn toy() -> Tensor {
    Tensor::new(&[2, 4, 1], vec![0.1, -2.5, 3.0e-7, 1.0 / 3.0, 7.0, 8.25, -0.0, 1e300]).unwrap()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn binary_series_round_trips_bit_identically() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("s.bin");
    write_series_bin(&path, &toy(), 5.0, "toy").unwrap();
    let (back, header) = read_series_bin(&path).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&toy()));
    assert_eq!((header.n, header.t, header.c, header.name.as_str()), (2, 4, 1, "toy"));
}

#[test]
fn csv_and_binary_load_identically() {
    let dir = tempdir().unwrap();
    let multi = Tensor::new(&[3, 2, 2], (0..12).map(|i| f64::from(i) * 0.7 - 1.9).collect()).unwrap();
    write_series_bin(&dir.path().join("s.bin"), &multi, 5.0, "m").unwrap();
    write_series_csv(&dir.path().join("s.csv"), &multi).unwrap();
    assert_eq!(
        read_series_csv(&dir.path().join("s.csv")).unwrap(),
        read_series_bin(&dir.path().join("s.bin")).unwrap().0
    );

    write(&dir.path().join("e.csv"), "src,dst,weight\n0,1,1.0\n1,2,0.5\n");
    let a = load_dataset(&dir.path().join("s.bin"), SeriesFormat::Bin, &dir.path().join("e.csv"), None).unwrap();
    let b = load_dataset(&dir.path().join("s.csv"), SeriesFormat::Csv, &dir.path().join("e.csv"), None).unwrap();
    assert_eq!(a.series, b.series);
    assert_eq!(a.graph, b.graph);
}

#[test]
fn load_errors_are_distinct() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    // Header declares 3 nodes, graph has 2.
    let three = Tensor::new(&[3, 2, 1], vec![1.0; 6]).unwrap();
    write_series_bin(&d.join("s.bin"), &three, 5.0, "x").unwrap();
    write(&d.join("e.csv"), "src,dst,weight\n0,1,1.0\n");
    write(&d.join("c.csv"), "node_id,x,y\n0,0,0\n1,1,0\n");
    let err = load_dataset(&d.join("s.bin"), SeriesFormat::Bin, &d.join("e.csv"), Some(&d.join("c.csv"))).unwrap_err();
    assert!(matches!(&err, CliError::Input(m) if m.contains("3 nodes") && m.contains("has 2")), "{err}");

    // Payload shorter than the header.
    fs::write(d.join("s.bin"), &fs::read(d.join("s.bin")).unwrap()[..40]).unwrap();
    let err = read_series_bin(&d.join("s.bin")).unwrap_err();
    assert!(err.to_string().contains("payload holds 5"), "{err}");

    // NaN in payload.
    let nan = Tensor::new(&[1, 2, 1], vec![1.0, f64::NAN]).unwrap();
    write_series_bin(&d.join("n.bin"), &nan, 5.0, "x").unwrap();
    assert!(read_series_bin(&d.join("n.bin")).unwrap_err().to_string().contains("NaN"));

    // CSV with a missing grid cell.
    write(&d.join("gap.csv"), "node,step,c0\n0,0,1.0\n0,1,2.0\n1,0,3.0\n");
    assert!(read_series_csv(&d.join("gap.csv")).is_err());
}

#[test]
fn graph_files_round_trip() {
    let ds = synth_diffusion(&SynthConfig { n: 10, steps: 3, ..SynthConfig::default() }).unwrap();
    let dir = tempdir().unwrap();
    let (e, c) = (dir.path().join("e.csv"), dir.path().join("c.csv"));
    write_graph(&ds.graph, &e, Some(&c)).unwrap();
    assert_eq!(read_graph(&e, Some(&c), None).unwrap(), ds.graph);

    write(&e, "src,dst,weight\n0,1,2.0\n1,0,2.0\n");
    assert_eq!(read_graph(&e, None, None).unwrap().edges(), vec![(0, 1, 2.0)]);
    write(&e, "src,dst,weight\n0,1,2.0\n1,0,3.0\n");
    assert!(read_graph(&e, None, None).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig { n: 6, t: 3, c: 1, f: 2, d_model: 4, l: 2, heads: 2, p0: 2, k_pe: 2, ffn_mult: 2 };
    let params = ModelParams::init(&cfg, 11).unwrap();
    let norm = Normalizer { mean: vec![0.5], std: vec![2.0] };
    let dir = tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &params, 11, Some(&norm)).unwrap();
    let (manifest, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, params);
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.normalizer, Some(norm));

    // A manifest claiming another width no longer lines up with the blob.
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    fs::write(dir.path().join("manifest.json"), text.replace("\"d_model\": 4", "\"d_model\": 8")).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn positional_encoding_cache() {
    let ds = synth_diffusion(&SynthConfig { n: 16, steps: 3, ..SynthConfig::default() }).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("pe.bin");
    let first = cached_pe(Some(&path), &ds.graph, 4, 512).unwrap();
    assert_eq!(first, laplacian_pe(&ds.graph, 4, 512).unwrap().vectors);
    // Overwrite the payload: a matching header means the cached bytes are used.
    let marked: Vec<u8> = (0..16 * 4).flat_map(|i| f64::from(i).to_le_bytes()).collect();
    fs::write(&path, &marked).unwrap();
    let cached = cached_pe(Some(&path), &ds.graph, 4, 512).unwrap();
    assert_eq!(cached.get(&[1, 1]), 5.0);
    // Different k invalidates the cache.
    let other = cached_pe(Some(&path), &ds.graph, 3, 512).unwrap();
    assert_eq!(other, laplacian_pe(&ds.graph, 3, 512).unwrap().vectors);
}

#[test]
fn scale_series_file_round_trip() {
    let ds = synth_diffusion(&SynthConfig { n: 20, steps: 3, ..SynthConfig::default() }).unwrap();
    let series = build_scale_series(&ds.graph, 5, 3, 1.3, 2).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("plans.json");
    write_scale_series(&path, &series).unwrap();
    assert_eq!(read_scale_series(&path).unwrap(), series);

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"p\": 5", "\"p\": 6", 1)).unwrap();
    assert!(read_scale_series(&path).is_err());
}
