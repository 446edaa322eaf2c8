//! Exercises the C ABI through the same raw-pointer surface a C caller uses.

use std::ffi::CString;
use std::os::raw::c_char;
use std::ptr;

use gcfuse_ffi::*;

fn last_error() -> String {
    unsafe {
        let needed = gcf_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0u8; needed + 1];
        gcf_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len());
        buf.truncate(needed);
        String::from_utf8(buf).unwrap()
    }
}

#[test]
fn null_arguments_are_rejected_not_crashed() {
    unsafe {
        assert_eq!(
            gcf_corpus_load(ptr::null(), ptr::null_mut()),
            GcfStatus::GcfErrNullPointer
        );
        assert_eq!(
            gcf_corpus_generate(10, 3, 0.8, 0.7, 0.5, 0, ptr::null_mut()),
            GcfStatus::GcfErrNullPointer
        );
        let mut model: *mut GcfModel = ptr::null_mut();
        assert_eq!(
            gcf_train(ptr::null(), ptr::null(), 0, 1, &mut model),
            GcfStatus::GcfErrNullPointer
        );
        // Accessors tolerate null handles.
        assert_eq!(gcf_corpus_len(ptr::null()), 0);
        assert_eq!(gcf_model_test_len(ptr::null()), 0);
        assert!(gcf_model_balanced_error(ptr::null()).is_nan());
        // Frees tolerate null.
        gcf_corpus_free(ptr::null_mut());
        gcf_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_reports_error_with_message() {
    unsafe {
        let mut corpus: *mut GcfCorpus = ptr::null_mut();
        let status = gcf_corpus_generate(10, 3, 1.5, 0.7, 0.5, 0, &mut corpus);
        assert_ne!(status, GcfStatus::GcfOk);
        assert!(corpus.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn missing_file_maps_to_io_error() {
    unsafe {
        let path = CString::new("/nonexistent/corpus.tsv").unwrap();
        let mut corpus: *mut GcfCorpus = ptr::null_mut();
        let status = gcf_corpus_load(path.as_ptr(), &mut corpus);
        assert_eq!(status, GcfStatus::GcfErrIo);
        assert!(last_error().contains("corpus.tsv") || !last_error().is_empty());
    }
}

#[test]
fn unknown_variant_name_is_a_parse_error() {
    unsafe {
        let mut corpus: *mut GcfCorpus = ptr::null_mut();
        assert_eq!(
            gcf_corpus_generate(60, 3, 0.8, 0.7, 0.5, 7, &mut corpus),
            GcfStatus::GcfOk
        );
        let name = CString::new("definitely_not_a_variant").unwrap();
        let mut model: *mut GcfModel = ptr::null_mut();
        let status = gcf_train(corpus, name.as_ptr(), 0, 1, &mut model);
        assert_ne!(status, GcfStatus::GcfOk);
        assert!(model.is_null());
        gcf_corpus_free(corpus);
    }
}

#[test]
fn generate_train_and_read_metrics_end_to_end() {
    unsafe {
        let mut corpus: *mut GcfCorpus = ptr::null_mut();
        assert_eq!(
            gcf_corpus_generate(80, 3, 0.8, 0.7, 0.5, 11, &mut corpus),
            GcfStatus::GcfOk
        );
        assert_eq!(gcf_corpus_len(corpus), 80);
        assert_eq!(gcf_corpus_num_classes(corpus), 3);
        assert!(gcf_corpus_num_edges(corpus) > 0);

        let name = CString::new("gnn_gcn").unwrap();
        let mut model: *mut GcfModel = ptr::null_mut();
        let status = gcf_train(corpus, name.as_ptr(), 0, 3, &mut model);
        assert_eq!(status, GcfStatus::GcfOk, "train failed: {}", last_error());

        let err = gcf_model_balanced_error(model);
        let f1 = gcf_model_macro_f1(model);
        assert!((0.0..=100.0).contains(&err));
        assert!((0.0..=100.0).contains(&f1));
        assert!(gcf_model_best_epoch(model) >= 1);

        let n_test = gcf_model_test_len(model);
        assert!(n_test > 0);
        for i in 0..n_test {
            let mut doc = 0usize;
            let mut pred = 0usize;
            assert_eq!(gcf_model_test_doc(model, i, &mut doc), GcfStatus::GcfOk);
            assert!(doc < 80);
            assert_eq!(
                gcf_model_test_prediction(model, doc, &mut pred),
                GcfStatus::GcfOk
            );
            assert!(pred < 3);
        }
        // Out-of-range enumeration and non-test documents are errors, not UB.
        let mut doc = 0usize;
        let mut pred = 0usize;
        assert_eq!(
            gcf_model_test_doc(model, n_test, &mut doc),
            GcfStatus::GcfErrContract
        );
        let mut train_doc = 0;
        while {
            let mut in_test = false;
            for i in 0..n_test {
                gcf_model_test_doc(model, i, &mut doc);
                if doc == train_doc {
                    in_test = true;
                }
            }
            in_test
        } {
            train_doc += 1;
        }
        assert_eq!(
            gcf_model_test_prediction(model, train_doc, &mut pred),
            GcfStatus::GcfErrContract
        );

        gcf_model_free(model);
        gcf_corpus_free(corpus);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    unsafe fn run() -> (f64, Vec<usize>) {
        let mut corpus: *mut GcfCorpus = ptr::null_mut();
        assert_eq!(
            gcf_corpus_generate(60, 3, 0.8, 0.7, 0.5, 5, &mut corpus),
            GcfStatus::GcfOk
        );
        let name = CString::new("lm_only").unwrap();
        let mut model: *mut GcfModel = ptr::null_mut();
        assert_eq!(gcf_train(corpus, name.as_ptr(), 1, 2, &mut model), GcfStatus::GcfOk);
        let err = gcf_model_balanced_error(model);
        let preds = (0..gcf_model_test_len(model))
            .map(|i| {
                let mut doc = 0usize;
                let mut pred = 0usize;
                gcf_model_test_doc(model, i, &mut doc);
                gcf_model_test_prediction(model, doc, &mut pred);
                pred
            })
            .collect();
        gcf_model_free(model);
        gcf_corpus_free(corpus);
        (err, preds)
    }
    let (a_err, a_preds) = unsafe { run() };
    let (b_err, b_preds) = unsafe { run() };
    assert_eq!(a_err.to_bits(), b_err.to_bits());
    assert_eq!(a_preds, b_preds);
}
