use std::ffi::CStr;
use std::ptr;

use cxrgen_ffi::*;

fn last_error() -> String {
    let p = cxr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn new_map(h: usize, w: usize, codes: &[u8]) -> *mut CxrLabelMap {
    let mut m = ptr::null_mut();
    assert_eq!(cxr_label_map_new(h, w, codes.as_ptr(), &mut m), CxrStatus::Ok);
    m
}

unsafe fn codes_of(m: *const CxrLabelMap) -> (usize, usize, Vec<u8>) {
    let (mut h, mut w) = (0, 0);
    assert_eq!(cxr_label_map_dims(m, &mut h, &mut w), CxrStatus::Ok);
    let mut buf = vec![0u8; h * w];
    assert_eq!(cxr_label_map_codes(m, buf.as_mut_ptr(), buf.len()), CxrStatus::Ok);
    (h, w, buf)
}

#[test]
fn png_round_trip_through_handles() {
    unsafe {
        let codes: Vec<u8> = (0..48).map(|i| (i % 6) as u8).collect();
        let m = new_map(6, 8, &codes);
        let (mut bytes, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(cxr_label_map_encode_png(m, &mut bytes, &mut len), CxrStatus::Ok);
        assert!(len > 0);
        let mut back = ptr::null_mut();
        assert_eq!(cxr_label_map_decode_png(bytes, len, &mut back), CxrStatus::Ok);
        assert_eq!(codes_of(back), (6, 8, codes));
        cxr_bytes_free(bytes, len);
        cxr_label_map_free(back);
        cxr_label_map_free(m);
    }
}

#[test]
fn invalid_codes_and_nulls_report_errors() {
    unsafe {
        let mut m = ptr::null_mut();
        let bad = [9u8; 4];
        assert_eq!(cxr_label_map_new(2, 2, bad.as_ptr(), &mut m), CxrStatus::Codec);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(cxr_label_map_new(2, 2, ptr::null(), &mut m), CxrStatus::NullPointer);
        let (mut h, mut w) = (0, 0);
        assert_eq!(cxr_label_map_dims(ptr::null(), &mut h, &mut w), CxrStatus::NullPointer);
        let ok = new_map(1, 1, &[0]);
        let mut buf = [0u8; 3];
        assert_eq!(cxr_label_map_codes(ok, buf.as_mut_ptr(), 3), CxrStatus::InvalidArgument);
        cxr_label_map_free(ok);
    }
}

#[test]
fn score_matches_hand_counts() {
    unsafe {
        // class 1: pred {0,1}, target {1,2} -> tp 1, fp 1, fn 1
        let p = new_map(1, 4, &[1, 1, 0, 0]);
        let t = new_map(1, 4, &[0, 1, 1, 0]);
        let mut s = CxrScore::default();
        assert_eq!(cxr_score(p, t, 1, &mut s), CxrStatus::Ok);
        assert_eq!(s.jaccard, 1.0 / 3.0);
        assert_eq!(s.dice, 0.5);
        assert_eq!(s.empty, 0);
        assert_eq!(cxr_score(p, t, 4, &mut s), CxrStatus::Ok);
        assert_eq!((s.jaccard, s.empty), (1.0, 1));
        assert_eq!(cxr_score(p, t, 17, &mut s), CxrStatus::InvalidArgument);
        let small = new_map(1, 2, &[0, 0]);
        assert_eq!(cxr_score(p, small, 1, &mut s), CxrStatus::Shape);
        for m in [p, t, small] {
            cxr_label_map_free(m);
        }
    }
}

#[test]
fn phantom_resize_dots_and_augment() {
    unsafe {
        let (mut img, mut lab) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cxr_phantom(3, 64, 0, &mut img, &mut lab), CxrStatus::Ok);
        let (mut h, mut w) = (0, 0);
        assert_eq!(cxr_image_dims(img, &mut h, &mut w), CxrStatus::Ok);
        assert_eq!((h, w), (64, 64));
        let mut px = vec![0f32; h * w];
        assert_eq!(cxr_image_data(img, px.as_mut_ptr(), px.len()), CxrStatus::Ok);
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut big = ptr::null_mut();
        assert_eq!(cxr_label_map_resize(lab, 128, 128, &mut big), CxrStatus::Ok);
        let (_, _, src) = codes_of(lab);
        let (bh, bw, up) = codes_of(big);
        assert_eq!((bh, bw), (128, 128));
        let present = |v: &[u8]| v.iter().copied().collect::<std::collections::BTreeSet<u8>>();
        assert!(present(&up).is_subset(&present(&src)));

        let mut d = ptr::null_mut();
        assert_eq!(cxr_dot_map(lab, 2, &mut d), CxrStatus::Ok);
        let (dh, dw, _) = codes_of(d);
        assert_eq!((dh, dw), (64, 64));

        let (mut ai, mut al) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cxr_augment(img, lab, 5, &mut ai, &mut al), CxrStatus::Ok);
        assert!(present(&codes_of(al).2).is_subset(&present(&src)));

        cxr_image_free(img);
        cxr_image_free(ai);
        for m in [lab, big, d, al] {
            cxr_label_map_free(m);
        }
    }
}

#[test]
fn image_rejects_out_of_range_values() {
    unsafe {
        let mut img = ptr::null_mut();
        let data = [0.5f32, 1.5];
        assert_ne!(cxr_image_new(1, 2, data.as_ptr(), &mut img), CxrStatus::Ok);
        assert!(img.is_null());
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    unsafe {
        let mut s = ptr::null_mut();
        let path = c"/nonexistent/model.ckpt";
        assert_eq!(cxr_segmenter_load(path.as_ptr(), &mut s), CxrStatus::Io);
        assert!(last_error().contains("nonexistent"));
    }
}

#[test]
fn segmenter_predicts_full_size_maps() {
    use cxrgen::nn::segmenter::{Segmenter, SegmenterConfig};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    let cfg = SegmenterConfig { base_channels: 4, groups: 2, crop: 32, ..Default::default() };
    Segmenter::build(&cfg).unwrap().checkpoint(0).unwrap().save(&path).unwrap();
    let cpath = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(cxr_segmenter_load(cpath.as_ptr(), &mut s), CxrStatus::Ok);
        let data = vec![0.25f32; 40 * 48];
        let mut img = ptr::null_mut();
        assert_eq!(cxr_image_new(40, 48, data.as_ptr(), &mut img), CxrStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(cxr_segmenter_predict(s, img, &mut out), CxrStatus::Ok);
        assert_eq!(codes_of(out).0, 40);
        cxr_label_map_free(out);
        cxr_image_free(img);
        cxr_segmenter_free(s);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cxrgen.h")).unwrap();
    for name in ["cxr_label_map_new", "cxr_score", "cxr_segmenter_predict", "CXR_STATUS_OK", "typedef struct CxrLabelMap"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"cxrgen.h\"\n\
         int main(void) {\n\
           CxrLabelMap *m = 0; uint8_t codes[4] = {0, 1, 2, 3};\n\
           CxrStatus s = cxr_label_map_new(2, 2, codes, &m);\n\
           cxr_label_map_free(m);\n\
           return s == CXR_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
