//! Files written the way the external embedding exporter writes them: framing
//! assembled by hand, not through this crate's encoder.

use std::path::Path;
use std::process::Command;

use protoseg::io::{load_embeddings, read_mask, write_mask, write_volume};
use protoseg::phantom::{default_spec, generate, query_seed};
use protoseg::VolumeImage;

/// Passthrough tap: one channel holding the raw intensities.
fn exporter_write(path: &Path, volume: &VolumeImage) {
    let [s, h, w] = volume.dims();
    let header = format!(r#"{{"version":1,"dims":[{s},{h},{w},1],"dtype":"f32","source_shape":[{h},{w}]}}"#);
    let mut bytes = b"PROTOSEG-VOL\0\0\0\0".to_vec();
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in volume.flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).unwrap();
}

fn two_slice_phantom(seed: u64) -> (VolumeImage, protoseg::LabelMask) {
    let mut spec = default_spec(seed);
    spec.dims[0] = 2;
    spec.organs = vec![spec.organs[0].clone()];
    spec.organs[0].center[0] = 0.5;
    spec.organs[0].axes[0] = 1.0;
    generate(&spec).unwrap()
}

#[test]
fn passthrough_export_loads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, _) = two_slice_phantom(1);
    let path = dir.path().join("vol.featvol");
    exporter_write(&path, &vol);

    let feats = load_embeddings(&path).unwrap();
    let [s, h, w] = vol.dims();
    assert_eq!(feats.dims(), [s, h, w, 1]);
    assert_eq!(feats.source_shape(), (h, w));
    let got: Vec<u32> = feats.flat().iter().map(|v| v.to_bits()).collect();
    let want: Vec<u32> = vol.flat().iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want);
}

#[test]
fn exported_truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, _) = two_slice_phantom(1);
    let path = dir.path().join("vol.featvol");
    exporter_write(&path, &vol);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_embeddings(&path).unwrap_err();
    assert!(err.to_string().contains("vol.featvol"), "{err}");
}

#[test]
fn segment_with_exported_features_matches_raw_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let (support, support_mask) = two_slice_phantom(11);
    let (query, query_mask) = two_slice_phantom(query_seed(11));
    write_volume(p("s.volraw"), &support).unwrap();
    write_mask(p("s.maskraw"), &support_mask).unwrap();
    write_volume(p("q.volraw"), &query).unwrap();
    write_mask(p("q.maskraw"), &query_mask).unwrap();
    exporter_write(&p("s.featvol"), &support);
    exporter_write(&p("q.featvol"), &query);

    let run = |out: &str, extractor: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_protoseg"))
            .arg("segment")
            .args(["--support-vol", p("s.volraw").to_str().unwrap()])
            .args(["--support-mask", p("s.maskraw").to_str().unwrap()])
            .args(["--query-vol", p("q.volraw").to_str().unwrap()])
            .args(["--shots", "1", "--out", p(out).to_str().unwrap()])
            .args(extractor)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_mask(p(out)).unwrap()
    };
    let from_file = run(
        "a.maskraw",
        &["--extractor", p("q.featvol").to_str().unwrap(), "--support-features", p("s.featvol").to_str().unwrap()],
    );
    let builtin = run("b.maskraw", &["--extractor", "raw"]);
    assert_eq!(from_file, builtin);
}
