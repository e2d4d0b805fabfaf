use std::ffi::{CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mzu::cli::main_with_args;
use mzu_ffi::*;

const LINE: &str = "hello world!\n";

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(std::iter::once("mzu").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("train.txt"), LINE.repeat(100)).unwrap();
    fs::write(data.join("valid.txt"), LINE.repeat(8)).unwrap();
    fs::write(data.join("test.txt"), LINE.repeat(8)).unwrap();
    let ckpt = dir.join("toy.ckpt");
    let mut args = vec![
        "train", "--hidden", "16", "--ffn", "16", "--embed", "8", "--batch", "4", "--tbptt", "10", "--dropout", "0",
        "--steps", "20", "--eval-interval", "20", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let (code, _, err) = run_cli(&args);
    assert_eq!(code, 0, "{err}");
    ckpt
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mzu_last_error()) }.to_str().unwrap().to_owned()
}

fn load(path: &Path) -> (MzuStatus, *mut MzuModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { mzu_model_load(c.as_ptr(), &mut model) };
    (status, model)
}

#[test]
fn loaded_model_matches_cli_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), &["--depth", "1"]);
    let (status, model) = load(&ckpt);
    assert_eq!(status, MzuStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");

    let mut vocab = 0;
    let mut params = 0;
    unsafe {
        assert_eq!(mzu_model_vocab_size(model, &mut vocab), MzuStatus::Ok);
        assert_eq!(mzu_model_param_count(model, &mut params), MzuStatus::Ok);
    }
    // Distinct characters of the corpus plus the reserved unknown symbol.
    assert_eq!(vocab, 10);
    assert!(params > 0);

    let text = LINE.repeat(8);
    let mut bpc = f64::NAN;
    let status = unsafe { mzu_evaluate_bpc(model, text.as_ptr(), text.len(), &mut bpc) };
    assert_eq!(status, MzuStatus::Ok, "{}", last_error());
    let (code, out, err) = run_cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--on", "valid"]);
    assert_eq!(code, 0, "{err}");
    let cli: f64 = out.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((bpc - cli).abs() < 5e-6, "ffi {bpc} cli {cli}");

    unsafe { mzu_model_free(model) };
}

#[test]
fn relevance_map_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), &[]);
    let (status, model) = load(&ckpt);
    assert_eq!(status, MzuStatus::Ok, "{}", last_error());

    let text = "hello world!\nhello";
    let last_q = 6;
    let mut map = ptr::null_mut();
    let status = unsafe { mzu_relevance_map(model, text.as_ptr(), text.len(), last_q, &mut map) };
    assert_eq!(status, MzuStatus::Ok, "{}", last_error());

    let (mut rows, mut cols) = (0, 0);
    assert_eq!(unsafe { mzu_relevance_dims(map, &mut rows, &mut cols) }, MzuStatus::Ok);
    assert_eq!(rows, last_q);
    assert_eq!(cols, text.len() - 1);

    let mut small = vec![0.0; rows * cols - 1];
    let status = unsafe { mzu_relevance_copy(map, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, MzuStatus::BufferTooSmall);
    assert!(last_error().contains("needs"));

    let mut buf = vec![0.0; rows * cols];
    assert_eq!(unsafe { mzu_relevance_copy(map, buf.as_mut_ptr(), buf.len()) }, MzuStatus::Ok);
    for (i, row) in buf.chunks(cols).enumerate() {
        // Query i sits at position len - last_q + i and sees that many states.
        let seen = text.len() - last_q + i;
        for (j, v) in row.iter().enumerate() {
            if j < seen {
                assert!((-1.0..=1.0).contains(v), "row {i} col {j} = {v}");
            } else {
                assert!(v.is_nan(), "row {i} col {j} = {v}");
            }
        }
    }

    unsafe {
        mzu_relevance_free(map);
        mzu_model_free(model);
    }
}

#[test]
fn zone_disagreement_anchors() {
    // Negated mean cosine over all ordered pairs, self pairs included.
    let cases: [(&[f64], usize, f64); 4] = [
        (&[1.0, 0.0, 0.0, 1.0], 2, -0.5),
        (&[1.0, 0.0, 2.0, 0.0], 2, -1.0),
        (&[1.0, 0.0, -3.0, 0.0], 2, 0.0),
        // Three zones: off-diagonal cosines 1, 0, 0 counted twice, plus 3 self pairs.
        (&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, -5.0 / 9.0),
    ];
    for (zones, n, want) in cases {
        let mut got = f64::NAN;
        let status = unsafe { mzu_zone_disagreement(zones.as_ptr(), n, zones.len() / n, &mut got) };
        assert_eq!(status, MzuStatus::Ok, "{}", last_error());
        assert!((got - want).abs() < 1e-12, "{zones:?}: {got} vs {want}");
    }
}

#[test]
fn null_and_invalid_arguments() {
    let mut out = 0.0;
    let mut count = 0;
    let mut model = ptr::null_mut();
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(mzu_model_load(ptr::null(), &mut model), MzuStatus::InvalidArgument);
        assert!(last_error().contains("null"));
        let path = CString::new("x").unwrap();
        assert_eq!(mzu_model_load(path.as_ptr(), ptr::null_mut()), MzuStatus::InvalidArgument);
        assert_eq!(mzu_model_param_count(ptr::null(), &mut count), MzuStatus::InvalidArgument);
        assert_eq!(mzu_model_vocab_size(ptr::null(), &mut count), MzuStatus::InvalidArgument);
        assert_eq!(mzu_evaluate_bpc(ptr::null(), ptr::null(), 0, &mut out), MzuStatus::InvalidArgument);
        assert_eq!(mzu_relevance_map(ptr::null(), ptr::null(), 0, 1, &mut map), MzuStatus::InvalidArgument);
        assert_eq!(mzu_relevance_dims(ptr::null(), &mut count, &mut count), MzuStatus::InvalidArgument);
        assert_eq!(mzu_relevance_copy(ptr::null(), ptr::null_mut(), 0), MzuStatus::InvalidArgument);
        assert_eq!(mzu_zone_disagreement(ptr::null(), 2, 2, &mut out), MzuStatus::InvalidArgument);
        assert_eq!(mzu_zone_disagreement([1.0].as_ptr(), 0, 1, &mut out), MzuStatus::InvalidArgument);
        mzu_model_free(ptr::null_mut());
        mzu_relevance_free(ptr::null_mut());
    }
}

#[test]
fn error_statuses_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let (status, model) = load(&dir.path().join("missing.ckpt"));
    assert_eq!(status, MzuStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(load(&junk).0, MzuStatus::Format);

    let ckpt = train(dir.path(), &["--model", "gru"]);
    let (status, model) = load(&ckpt);
    assert_eq!(status, MzuStatus::Ok, "{}", last_error());
    let mut map = ptr::null_mut();
    let mut bpc = 0.0;
    unsafe {
        // Too short for the requested query count.
        assert_eq!(mzu_relevance_map(model, b"hel".as_ptr(), 3, 5, &mut map), MzuStatus::Data);
        assert_eq!(mzu_relevance_map(model, b"hello".as_ptr(), 5, 0, &mut map), MzuStatus::Config);
        assert!(map.is_null());
        assert_eq!(mzu_evaluate_bpc(model, ptr::null(), 0, &mut bpc), MzuStatus::Data);
        // A success clears the previous message.
        assert_eq!(mzu_evaluate_bpc(model, b"hello".as_ptr(), 5, &mut bpc), MzuStatus::Ok);
        assert_eq!(last_error(), "");
        mzu_model_free(model);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(mzu_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("mzu.h")
}

#[test]
fn header_declares_the_api() {
    let h = fs::read_to_string(header()).unwrap();
    assert!(h.contains("#ifndef MZU_H"));
    for name in [
        "mzu_last_error", "mzu_model_load", "mzu_model_free", "mzu_model_param_count", "mzu_model_vocab_size",
        "mzu_evaluate_bpc", "mzu_relevance_map", "mzu_relevance_dims", "mzu_relevance_copy", "mzu_relevance_free",
        "mzu_zone_disagreement", "mzu_version",
    ] {
        assert!(h.contains(&format!("{name}(")), "{name} missing");
    }
    assert!(h.contains("MZU_STATUS_OK = 0"));
    assert!(h.contains("MZU_STATUS_INTERNAL = 8"));
    assert!(h.contains("typedef struct MzuModel MzuModel;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, header compile check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    fs::write(
        &src,
        "#include \"mzu.h\"\nint main(void) { MzuModel *m = 0; size_t n; return mzu_model_vocab_size(m, &n) == MZU_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header().parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
