use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use clicooper::harness::{run_to_dir, RunConfig};
use clicooper_ffi::*;

fn last_error() -> Option<String> {
    let p = clc_last_error_message();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { clc_string_free(p) };
    Some(s)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn label_map_round_trip() {
    let g = [2usize, 3, 1];
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(clc_label_map_build(3, g.as_ptr(), 9, &mut map), ClcStatus::Ok);
        assert_eq!(clc_label_map_pseudo_count(map), 6);
        assert!((clc_label_map_gamma(map) - 2.0).abs() < 1e-12);

        let mut buf = [0usize; 3];
        let mut len = 0;
        assert_eq!(clc_label_map_forward(map, 1, buf.as_mut_ptr(), 3, &mut len), ClcStatus::Ok);
        assert_eq!(len, 3);
        for &p in &buf[..len] {
            let mut class = usize::MAX;
            assert_eq!(clc_label_map_demask(map, p, &mut class), ClcStatus::Ok);
            assert_eq!(class, 1);
        }

        let mut json = ptr::null_mut();
        assert_eq!(clc_label_map_to_json(map, &mut json), ClcStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(clc_label_map_from_json(json, &mut again), ClcStatus::Ok);
        clc_string_free(json);
        for p in 0..6 {
            let (mut a, mut b) = (0, 0);
            clc_label_map_demask(map, p, &mut a);
            clc_label_map_demask(again, p, &mut b);
            assert_eq!(a, b);
        }
        clc_label_map_free(again);
        clc_label_map_free(map);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let g = [2usize, 2];
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(clc_label_map_build(2, ptr::null(), 1, &mut map), ClcStatus::NullPointer);
        assert!(last_error().unwrap().contains("g is null"));

        let zero = [0usize, 2];
        assert_eq!(clc_label_map_build(2, zero.as_ptr(), 1, &mut map), ClcStatus::InvalidArgument);
        assert!(last_error().is_some());

        assert_eq!(clc_label_map_build(2, g.as_ptr(), 1, &mut map), ClcStatus::Ok);
        assert_eq!(last_error(), None);

        let mut out = 0;
        assert_eq!(clc_label_map_demask(map, 4, &mut out), ClcStatus::InvalidArgument);

        let mut buf = [0usize; 1];
        let mut len = 0;
        assert_eq!(
            clc_label_map_forward(map, 0, buf.as_mut_ptr(), 1, &mut len),
            ClcStatus::BufferTooSmall
        );
        assert_eq!(len, 2);
        clc_label_map_free(map);

        assert_eq!(clc_label_map_pseudo_count(ptr::null()), 0);
        clc_label_map_free(ptr::null_mut());
        clc_string_free(ptr::null_mut());
    }
}

#[test]
fn clip_and_latency() {
    let mut row = [3.0, -1.0, 0.0, 4.0];
    unsafe {
        assert_eq!(clc_clip_l1(row.as_mut_ptr(), 4, 2.0), ClcStatus::Ok);
        assert!((row.iter().map(|v: &f64| v.abs()).sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(clc_clip_l1(row.as_mut_ptr(), 4, -1.0), ClcStatus::InvalidArgument);

        let mb = 1e6;
        let sizes = [160.0 * mb, 80.0 * mb, 40.0 * mb];
        let mut each = [0.0; 3];
        let mut total = 0.0;
        assert_eq!(
            clc_estimate_latency(sizes.as_ptr(), 3, 200.0 * mb, 0.0, each.as_mut_ptr(), &mut total),
            ClcStatus::Ok
        );
        assert_eq!(each, [0.8, 0.4, 0.2]);
        assert!((total - 1.4).abs() < 1e-12);
        assert_eq!(
            clc_estimate_latency(sizes.as_ptr(), 3, 0.0, 0.0, each.as_mut_ptr(), &mut total),
            ClcStatus::InvalidArgument
        );
    }
}

#[test]
fn verifies_a_persisted_run_and_rejects_a_tampered_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.plan.epochs = 4;
    run_to_dir(&cfg, dir.path()).unwrap();

    unsafe {
        let mut cache = ptr::null_mut();
        assert_eq!(clc_dp_cache_load(cpath(&dir.path().join("cache.cldp")).as_ptr(), &mut cache), ClcStatus::Ok);
        assert!(clc_dp_cache_rows(cache) > 0);
        assert_eq!(clc_dp_cache_cols(cache), 8);
        assert_eq!(clc_dp_cache_epsilon(cache), 5.0);
        let mut digest = [0u8; 32];
        assert_eq!(clc_dp_cache_digest(cache, digest.as_mut_ptr()), ClcStatus::Ok);
        assert_ne!(digest, [0u8; 32]);

        let mut segs = Vec::new();
        for i in 1..=3 {
            let mut s = ptr::null_mut();
            let p = cpath(&dir.path().join(format!("trainer_{i}.clwc")));
            assert_eq!(clc_segment_load(p.as_ptr(), &mut s), ClcStatus::Ok);
            segs.push(s as *const ClcSegment);
        }
        assert_eq!(clc_segment_input_dim(segs[0]), 8);
        assert_eq!(clc_segment_output_dim(segs[2]), 8);

        let x = [0.1; 2 * 8];
        let mut y = vec![0.0; 2 * 128];
        assert_eq!(clc_segment_infer(segs[0], x.as_ptr(), 2, y.as_mut_ptr(), y.len()), ClcStatus::Ok);
        assert!(y.iter().any(|v| *v != 0.0));
        assert_eq!(
            clc_segment_infer(segs[0], x.as_ptr(), 2, y.as_mut_ptr(), 10),
            ClcStatus::BufferTooSmall
        );

        let manifest = cpath(&dir.path().join("manifest.json"));
        let mut report = ptr::null_mut();
        assert_eq!(
            clc_verify_chain(segs.as_ptr(), 3, cache, manifest.as_ptr(), 0.95, &mut report),
            ClcStatus::Ok
        );
        assert!(clc_report_success(report));
        assert_eq!(clc_report_link_count(report), 3);
        let mut eta = 0.0;
        assert_eq!(clc_report_link_eta(report, 2, &mut eta), ClcStatus::Ok);
        assert!(eta >= 0.99);
        assert_eq!(clc_report_link_eta(report, 3, &mut eta), ClcStatus::InvalidArgument);
        let mut json = ptr::null_mut();
        assert_eq!(clc_report_to_json(report, &mut json), ClcStatus::Ok);
        assert!(CStr::from_ptr(json).to_str().unwrap().contains("\"overall\":\"Success\""));
        clc_string_free(json);
        clc_report_free(report);

        segs.swap(0, 1);
        let mut swapped = ptr::null_mut();
        assert_eq!(
            clc_verify_chain(segs.as_ptr(), 3, cache, manifest.as_ptr(), 0.95, &mut swapped),
            ClcStatus::Ok
        );
        assert!(!clc_report_success(swapped));
        clc_report_free(swapped);

        for s in segs {
            clc_segment_free(s as *mut ClcSegment);
        }
        clc_dp_cache_free(cache);
    }

    let path = dir.path().join("cache.cldp");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let mut cache = ptr::null_mut();
    let status = unsafe { clc_dp_cache_load(cpath(&path).as_ptr(), &mut cache) };
    assert_eq!(status, ClcStatus::DigestMismatch);
    assert!(cache.is_null());

    let missing = cpath(&dir.path().join("nope.cldp"));
    assert_eq!(unsafe { clc_dp_cache_load(missing.as_ptr(), &mut cache) }, ClcStatus::Io);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/clicooper.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["clc_label_map_build", "clc_verify_chain", "clc_last_error_message", "CLC_STATUS_OK"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"clicooper.h\"\nint main(void) {\n  size_t g[2] = {2, 2};\n  ClcLabelMap *m = NULL;\n  ClcStatus s = clc_label_map_build(2, g, 1, &m);\n  clc_label_map_free(m);\n  return s == CLC_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
