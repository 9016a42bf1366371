use std::ffi::{c_char, CStr, CString};
use std::ptr;

use mapl::backbones::{build_fixtures, FixtureConfig, PretrainConfig};
use mapl::mapper::{Mapper, MapperConfig};
use mapl_ffi::*;

fn last_error() -> String {
    let p = mapl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { mapl_string_free(p) };
    s
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mapl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn parameter_counts() {
    let cases = [
        ("", 3_432_192u64),
        ("size = large", 19_465_728),
        ("mapper.variant = linear", 4_198_400),
        ("variant = mlp", 135_398_400),
    ];
    for (text, want) in cases {
        let c = CString::new(text).unwrap();
        let mut n = 0u64;
        assert_eq!(unsafe { mapl_count_parameters(c.as_ptr(), &mut n) }, MaplStatus::Ok);
        assert_eq!(n, want, "{text:?}");
    }
}

#[test]
fn bad_config_reports_field() {
    let c = CString::new("heads = 7").unwrap();
    let mut n = 0u64;
    assert_eq!(unsafe { mapl_count_parameters(c.as_ptr(), &mut n) }, MaplStatus::Config);
    assert!(last_error().contains("d_hidden"), "{}", last_error());

    let c = CString::new("no equals sign").unwrap();
    assert_eq!(unsafe { mapl_count_parameters(c.as_ptr(), &mut n) }, MaplStatus::Parse);
}

#[test]
fn null_pointers_are_rejected() {
    let mut n = 0u64;
    assert_eq!(
        unsafe { mapl_count_parameters(ptr::null(), &mut n) },
        MaplStatus::NullPointer
    );
    let c = CString::new("").unwrap();
    assert_eq!(
        unsafe { mapl_count_parameters(c.as_ptr(), ptr::null_mut()) },
        MaplStatus::NullPointer
    );
    assert!(last_error().contains("out"));
    unsafe {
        mapl_string_free(ptr::null_mut());
        mapl_mapper_free(ptr::null_mut());
        mapl_pipeline_free(ptr::null_mut());
    }
}

#[test]
fn metrics_through_the_c_interface() {
    let answers: Vec<CString> = (0..10)
        .map(|i| CString::new(if i < 3 { "two" } else { "three" }).unwrap())
        .collect();
    let ptrs: Vec<*const c_char> = answers.iter().map(|a| a.as_ptr()).collect();
    let pred = CString::new("Two").unwrap();
    let mut acc = -1.0;
    let status = unsafe { mapl_vqa_accuracy(pred.as_ptr(), ptrs.as_ptr(), ptrs.len(), &mut acc) };
    assert_eq!(status, MaplStatus::Ok);
    assert_eq!(acc, 0.9);

    let status = unsafe { mapl_vqa_accuracy(pred.as_ptr(), ptrs.as_ptr(), 4, &mut acc) };
    assert_eq!(status, MaplStatus::Data);

    let cand = CString::new("the cat sat on the mat").unwrap();
    let refs = CString::new("the cat sat on the mat").unwrap();
    let mut bleu = -1.0;
    let status = unsafe { mapl_bleu4(&cand.as_ptr(), &refs.as_ptr(), 1, &mut bleu) };
    assert_eq!(status, MaplStatus::Ok);
    assert!((bleu - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_utf8_is_reported() {
    let bytes = CString::new(vec![0xffu8, 0xfe]).unwrap();
    let mut n = 0u64;
    assert_eq!(
        unsafe { mapl_count_parameters(bytes.as_ptr(), &mut n) },
        MaplStatus::InvalidUtf8
    );
}

#[test]
fn mapper_and_pipeline_handles() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build_fixtures(&FixtureConfig {
        n_train: 40,
        n_eval: 10,
        pretrain: PretrainConfig {
            steps: 5,
            ..PretrainConfig::default()
        },
        ..FixtureConfig::default()
    })
    .unwrap();
    fx.write(dir.path()).unwrap();

    let mapper = Mapper::init(MapperConfig::toy(), 3, false).unwrap();
    let ckpt = dir.path().join("mapper.ckpt");
    mapper.to_checkpoint().save(&ckpt).unwrap();
    let ckpt_c = CString::new(ckpt.to_str().unwrap()).unwrap();

    let mut handle: *mut MaplMapper = ptr::null_mut();
    assert_eq!(unsafe { mapl_mapper_load(ckpt_c.as_ptr(), &mut handle) }, MaplStatus::Ok);
    let (mut r_in, mut c_in, mut r_out, mut c_out) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(mapl_mapper_input_shape(handle, &mut r_in, &mut c_in), MaplStatus::Ok);
        assert_eq!(mapl_mapper_output_shape(handle, &mut r_out, &mut c_out), MaplStatus::Ok);
    }
    assert_eq!((r_in, c_in, r_out, c_out), (10, 32, 11, 64));

    let img = fx.task.eval_captions[0].image.clone();
    let feats = fx.backbones.features(&img, false).unwrap();
    let mut out = vec![0.0; r_out * c_out];
    let status = unsafe {
        mapl_mapper_map(handle, feats.0.data().as_ptr(), r_in, c_in, out.as_mut_ptr(), out.len())
    };
    assert_eq!(status, MaplStatus::Ok);
    assert_eq!(out, mapper.map(&feats).unwrap().0.data());

    let status = unsafe {
        mapl_mapper_map(handle, feats.0.data().as_ptr(), r_in, c_in, out.as_mut_ptr(), 3)
    };
    assert_eq!(status, MaplStatus::BufferTooSmall);
    let status = unsafe {
        mapl_mapper_map(handle, feats.0.data().as_ptr(), r_in - 1, c_in, out.as_mut_ptr(), out.len())
    };
    assert_eq!(status, MaplStatus::Shape);
    unsafe { mapl_mapper_free(handle) };

    let dir_c = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut pipe: *mut MaplPipeline = ptr::null_mut();
    assert_eq!(
        unsafe { mapl_pipeline_load(dir_c.as_ptr(), ckpt_c.as_ptr(), &mut pipe) },
        MaplStatus::Ok
    );
    let cells: Vec<u32> = img.cells().iter().map(|&c| c as u32).collect();
    let mut text: *mut c_char = ptr::null_mut();
    let status = unsafe { mapl_pipeline_caption(pipe, cells.as_ptr(), cells.len(), &mut text) };
    assert_eq!(status, MaplStatus::Ok);
    let caption = take_string(text);
    assert_eq!(caption, mapl::inference::caption(&mapper, &fx.backbones, &img).unwrap());

    let status =
        unsafe { mapl_pipeline_answer_color(pipe, cells.as_ptr(), cells.len(), 1, 2, &mut text) };
    assert_eq!(status, MaplStatus::Ok);
    let answer = take_string(text);
    let query = mapl::backbones::synth::VqaExample {
        image: img.clone(),
        question: "question : color of 1 2 ?".into(),
        answers: Vec::new(),
    };
    assert_eq!(answer, mapl::inference::answer(&mapper, &fx.backbones, &[], &query).unwrap());

    let status =
        unsafe { mapl_pipeline_answer_color(pipe, cells.as_ptr(), cells.len(), 0, 1, &mut text) };
    assert_eq!(status, MaplStatus::Data);
    let bad = [9u32; 9];
    let status = unsafe { mapl_pipeline_caption(pipe, bad.as_ptr(), bad.len(), &mut text) };
    assert_eq!(status, MaplStatus::Data);
    let small = [0u32; 4];
    let status = unsafe { mapl_pipeline_caption(pipe, small.as_ptr(), small.len(), &mut text) };
    assert_eq!(status, MaplStatus::Shape);
    unsafe { mapl_pipeline_free(pipe) };

    let wide = Mapper::init(MapperConfig { d_in: 16, ..MapperConfig::toy() }, 0, false).unwrap();
    let wide_path = dir.path().join("wide.ckpt");
    wide.to_checkpoint().save(&wide_path).unwrap();
    let wide_c = CString::new(wide_path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { mapl_pipeline_load(dir_c.as_ptr(), wide_c.as_ptr(), &mut pipe) },
        MaplStatus::Config
    );

    let missing = CString::new("/nonexistent/mapper.ckpt").unwrap();
    assert_eq!(unsafe { mapl_mapper_load(missing.as_ptr(), &mut handle) }, MaplStatus::Io);
}
