use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use priorwarp_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        pw_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

/// Two boxes, classes 1 and 2, on an 8^3 grid.
fn boxes() -> ([usize; 3], Vec<u8>) {
    let dims = [8usize, 8, 8];
    let mut v = vec![0u8; 512];
    for h in 0..8 {
        for w in 0..8 {
            for d in 0..8 {
                let i = (h * 8 + w) * 8 + d;
                if (2..5).contains(&h) && (2..5).contains(&w) && (1..4).contains(&d) {
                    v[i] = 1;
                } else if (4..7).contains(&d) && (4..7).contains(&w) && (3..6).contains(&h) {
                    v[i] = 2;
                }
            }
        }
    }
    (dims, v)
}

fn new_labels(dims: [usize; 3], data: &[u8]) -> *mut PwLabels {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pw_labels_new(dims.as_ptr(), data.as_ptr(), &mut out) }, PwStatus::Ok);
    out
}

#[test]
fn version_names_formats() {
    let v = unsafe { CStr::from_ptr(pw_version()) }.to_str().unwrap();
    assert!(v.contains("PWV1") && v.contains("params v1"), "{v}");
}

#[test]
fn labels_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = cstr(&dir.path().join("l.pwv"));
    let (dims, data) = boxes();
    let l = new_labels(dims, &data);
    unsafe {
        assert_eq!(pw_labels_write(l, file.as_ptr()), PwStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(pw_labels_read(file.as_ptr(), &mut back), PwStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(pw_labels_dims(back, d.as_mut_ptr()), PwStatus::Ok);
        assert_eq!(d, dims);
        let mut buf = vec![0u8; 512];
        assert_eq!(pw_labels_copy(back, buf.as_mut_ptr(), buf.len()), PwStatus::Ok);
        assert_eq!(buf, data);
        assert_eq!(pw_labels_copy(back, buf.as_mut_ptr(), 10), PwStatus::Argument);
        pw_labels_free(back);
        pw_labels_free(l);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.pwv");
    std::fs::write(&junk, b"not a volume").unwrap();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(pw_labels_read(cstr(&junk).as_ptr(), &mut out), PwStatus::Format);
        assert!(last_error().contains("magic"), "{}", last_error());
        assert!(out.is_null());
        let missing = cstr(&dir.path().join("missing.pwv"));
        assert_eq!(pw_labels_read(missing.as_ptr(), &mut out), PwStatus::Io);
        assert_eq!(pw_labels_read(ptr::null(), &mut out), PwStatus::NullPointer);
        assert_eq!(pw_labels_dims(ptr::null(), ptr::null_mut()), PwStatus::NullPointer);
        let bad = [9u8; 8];
        assert_eq!(pw_labels_new([2usize, 2, 2].as_ptr(), bad.as_ptr(), &mut out), PwStatus::Ok);
        let mut prior = ptr::null_mut();
        assert_eq!(pw_prior_from_labels(out, 2, 3.0, 20.0, &mut prior), PwStatus::Argument);
        pw_labels_free(out);
        // freeing null is a no-op
        pw_labels_free(ptr::null_mut());
        pw_prior_free(ptr::null_mut());
        pw_params_free(ptr::null_mut());
        pw_report_free(ptr::null_mut());
    }
}

#[test]
fn eval_of_identical_maps_is_perfect() {
    let (dims, data) = boxes();
    let l = new_labels(dims, &data);
    let (mut dsc, mut hd, mut nsd) = (0.0, -1.0, 0.0);
    unsafe {
        assert_eq!(pw_eval(l, l, 2, 1.0, &mut dsc, &mut hd, &mut nsd), PwStatus::Ok);
        pw_labels_free(l);
    }
    assert_eq!((dsc, hd, nsd), (1.0, 0.0, 1.0));
}

#[test]
fn fit_recovers_a_shifted_target() {
    let (dims, data) = boxes();
    let canonical = new_labels(dims, &data);
    // target: canonical moved by one voxel along d
    let mut moved = vec![0u8; 512];
    for i in 0..512 {
        if i % 8 < 7 {
            moved[i + 1] = data[i];
        }
    }
    let target = new_labels(dims, &moved);
    let config = CString::new(r#"{"iters": 150, "warmup_iters": 10, "grid": [2, 2, 2]}"#).unwrap();
    unsafe {
        let mut prior = ptr::null_mut();
        assert_eq!(pw_prior_from_labels(canonical, 2, 3.0, 20.0, &mut prior), PwStatus::Ok);
        let mut report = ptr::null_mut();
        assert_eq!(pw_fit(target, prior, config.as_ptr(), &mut report), PwStatus::Ok, "{}", last_error());
        let mut dice = 0.0;
        assert_eq!(pw_report_final_dice(report, &mut dice), PwStatus::Ok);
        assert!(dice > 0.9, "dice {dice}");
        let json = CStr::from_ptr(pw_report_json(report)).to_str().unwrap();
        let v: serde_json::Value = serde_json::from_str(json).unwrap();
        assert_eq!(v["trail"].as_array().unwrap().len(), 150);

        let mut params = ptr::null_mut();
        assert_eq!(pw_report_params(report, &mut params), PwStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let file = cstr(&dir.path().join("p.json"));
        assert_eq!(pw_params_write(params, file.as_ptr()), PwStatus::Ok);
        let mut reread = ptr::null_mut();
        assert_eq!(pw_params_read(file.as_ptr(), &mut reread), PwStatus::Ok);
        let mut warped = ptr::null_mut();
        assert_eq!(pw_params_warp_labels(reread, canonical, &mut warped), PwStatus::Ok);
        let (mut dsc, mut hd, mut nsd) = (0.0, 0.0, 0.0);
        assert_eq!(pw_eval(warped, target, 2, 1.0, &mut dsc, &mut hd, &mut nsd), PwStatus::Ok);
        assert!(dsc > 0.9, "warped dsc {dsc}");

        let bad = CString::new(r#"{"itres": 3}"#).unwrap();
        let mut r2 = ptr::null_mut();
        assert_eq!(pw_fit(target, prior, bad.as_ptr(), &mut r2), PwStatus::Format);
        assert!(last_error().contains("itres"));

        for h in [warped, target, canonical] {
            pw_labels_free(h);
        }
        pw_params_free(reread);
        pw_params_free(params);
        pw_report_free(report);
        pw_prior_free(prior);
    }
}

#[test]
fn prior_round_trip_keeps_seed() {
    let dir = tempfile::tempdir().unwrap();
    let file = cstr(&dir.path().join("prior.pwv"));
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(pw_prior_random(3, [4usize, 4, 4].as_ptr(), 11, &mut p), PwStatus::Ok);
        assert_eq!(pw_prior_write(p, file.as_ptr()), PwStatus::Ok);
        let mut q = ptr::null_mut();
        assert_eq!(pw_prior_read(file.as_ptr(), &mut q), PwStatus::Ok);
        pw_prior_free(p);
        pw_prior_free(q);
    }
    let sidecar = std::fs::read_to_string(dir.path().join("prior.pwv.json")).unwrap();
    assert!(sidecar.contains("\"seed\":11"), "{sidecar}");
}

const EXPORTS: &[&str] = &[
    "pw_version",
    "pw_last_error_message",
    "pw_labels_new",
    "pw_labels_read",
    "pw_labels_write",
    "pw_labels_dims",
    "pw_labels_copy",
    "pw_labels_free",
    "pw_prior_random",
    "pw_prior_from_labels",
    "pw_prior_read",
    "pw_prior_write",
    "pw_prior_free",
    "pw_fit",
    "pw_report_final_dice",
    "pw_report_json",
    "pw_report_params",
    "pw_report_free",
    "pw_params_read",
    "pw_params_write",
    "pw_params_warp_labels",
    "pw_params_free",
    "pw_eval",
];

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/priorwarp.h")).unwrap();
    for name in EXPORTS {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["PwLabels", "PwPrior", "PwParams", "PwReport", "PW_STATUS_OK", "PW_STATUS_PANIC"] {
        assert!(header.contains(ty), "{ty} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"priorwarp.h\"\nint main(void) { PwLabels *l = 0; PwStatus s = pw_labels_read(\"x\", &l); pw_labels_free(l); return (int)s; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
