use pds::encoder::{BlockType, Preset};
use pds::harness::gradcheck::model_check_config;
use pds::harness::{model_grad_check, train_toy, FeatureFile, FeatureItem, ToyConfig, ToyTask};
use proptest::prelude::*;

fn feature_file() -> impl Strategy<Value = FeatureFile> {
    let item = (1u32..20, 1u32..6).prop_flat_map(|(frames, dim)| {
        prop::collection::vec(any::<f32>(), (frames * dim) as usize)
            .prop_map(move |data| FeatureItem { frames, dim, data })
    });
    prop::collection::vec(item, 0..5).prop_flat_map(|items| {
        let n = items.len();
        prop::option::of(prop::collection::vec(any::<u32>(), n)).prop_map(
            move |transcript_lengths| FeatureFile {
                items: items.clone(),
                transcript_lengths,
            },
        )
    })
}

proptest! {
    #[test]
    fn feature_file_bytes_round_trip(file in feature_file()) {
        let bytes = file.to_bytes().unwrap();
        let back = FeatureFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.frame_counts(), file.frame_counts());
        prop_assert_eq!(back.transcript_lengths, file.transcript_lengths);
    }

    #[test]
    fn truncated_files_are_rejected(file in feature_file(), cut in 1usize..64) {
        let bytes = file.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        // dropping the whole optional transcript table leaves a valid file
        let table = file.transcript_lengths.as_ref().map_or(0, |t| 4 + 4 * t.len());
        prop_assume!(keep != bytes.len() - table || table == 0);
        prop_assert!(FeatureFile::from_bytes(&bytes[..keep]).is_err());
    }
}

fn check_model(block: BlockType) {
    for preset in [Preset::Stack4, Preset::PdsBase8, Preset::PdsBase32] {
        let report = model_grad_check(preset, block, 3, &model_check_config(3)).unwrap();
        assert!(
            report.passed,
            "{preset:?}/{block:?}: max rel {:.3e}",
            report.max_rel_error
        );
        assert!(report.checked > 500);
        assert!(
            report.nonsmooth * 100 <= report.checked,
            "{} kinks in {}",
            report.nonsmooth,
            report.checked
        );
    }
}

#[test]
fn transformer_model_gradients() {
    check_model(BlockType::Transformer);
}

#[test]
fn conformer_model_gradients() {
    check_model(BlockType::Conformer);
}

#[test]
fn copy_task_learns_and_generalizes() {
    let report = train_toy(&ToyConfig::new(ToyTask::Copy)).unwrap();
    assert!(report.reduction >= 0.5, "reduction {}", report.reduction);
    assert!(report.fusion_weight_shift() > 1e-6);
    let exact = report.exact_match.unwrap();
    assert!(exact >= 0.95, "held-out exact match {exact}");
}

#[test]
fn per_unit_classification_trains() {
    let mut cfg = ToyConfig::new(ToyTask::PerUnitClassification);
    cfg.steps = 300;
    let report = train_toy(&cfg).unwrap();
    assert!(report.reduction > 0.3, "reduction {}", report.reduction);
    assert!(report.exact_match.is_none());
    assert_eq!(report.losses.len(), 300);
}

#[test]
fn diverging_run_is_reported() {
    let mut cfg = ToyConfig::new(ToyTask::Copy);
    cfg.steps = 5;
    cfg.lr = 1e300;
    assert!(matches!(
        train_toy(&cfg),
        Err(pds::PdsError::Diverged { .. })
    ));
}
