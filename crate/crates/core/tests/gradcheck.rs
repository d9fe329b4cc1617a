use tinylm_core::gradcheck::{GradCase, REL_TOL};

const POINTS: u64 = 3;

macro_rules! gradcheck {
    ($($name:ident => $case:ident,)*) => {
        $(
            #[test]
            fn $name() {
                let r = GradCase::$case.run(POINTS, line!() as u64);
                assert!(r.worst_elem < REL_TOL, "f64 elementwise error {:.3e}", r.worst_elem);
                assert!(r.worst_norm < REL_TOL, "f32 normwise error {:.3e}", r.worst_norm);
            }
        )*
    };
}

gradcheck! {
    matmul_2d => Matmul2d,
    matmul_folds_leading_axes => MatmulFoldsLeadingAxes,
    matmul_broadcast_batch => MatmulBroadcastBatch,
    add_broadcast => AddBroadcast,
    sub_broadcast_middle_axis => SubBroadcastMiddleAxis,
    mul_broadcast => MulBroadcast,
    scale => Scale,
    reshape => Reshape,
    permute => Permute,
    transpose => Transpose,
    gelu_new => GeluNew,
    gelu => Gelu,
    silu => Silu,
    relu => Relu,
    tanh => Tanh,
    softmax => Softmax,
    log_softmax => LogSoftmax,
    layer_norm => LayerNorm,
    dropout_fixed_mask => DropoutFixedMask,
    gather_rows_with_repeats => GatherRowsWithRepeats,
    rel_scores_query => RelScoresQuery,
    rel_scores_key => RelScoresKey,
    cross_entropy_with_ignored_rows => CrossEntropyWithIgnoredRows,
    cross_entropy_class_weighted => CrossEntropyClassWeighted,
    sum => Sum,
    mean => Mean,
    attention_block_composite => AttentionBlock,
}

#[test]
fn every_case_is_listed_once() {
    let mut names: Vec<String> = GradCase::ALL.iter().map(|c| format!("{c:?}")).collect();
    names.dedup();
    assert_eq!(names.len(), 27);
}
