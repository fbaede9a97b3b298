//! Property tests for the checkpoint format: lossless f64 round trips and
//! byte-stable rewrites on arbitrary tensor sets.

use lorakit_cli::checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind, Dtype, FORMAT_VERSION,
};
use lorakit_core::matrix::Matrix;
use lorakit_core::model::ModelConfig;
use proptest::prelude::*;

fn arb_matrix() -> impl Strategy<Value = Matrix> {
    ((1usize..6, 1usize..6)).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6f64..1e6f64, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f64_round_trip_is_lossless_and_byte_stable(tensors in proptest::collection::vec(arb_matrix(), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let named: Vec<(String, &Matrix)> =
            tensors.iter().enumerate().map(|(i, m)| (format!("t{i}"), m)).collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::FullModel,
            model_config: ModelConfig::toy(),
            strategy: None,
            seed: 1,
            lora: Vec::new(),
            tensor_index: Vec::new(),
        };
        write_checkpoint(&p1, header, &named, Dtype::F64).unwrap();

        let loaded = read_checkpoint(&p1).unwrap();
        prop_assert_eq!(loaded.tensors.len(), tensors.len());
        for (i, m) in tensors.iter().enumerate() {
            prop_assert_eq!(loaded.tensor(&format!("t{i}")).unwrap(), m);
        }

        // Rewrite from the parsed representation: bytes must not move.
        let renamed: Vec<(String, &Matrix)> =
            loaded.tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
        let mut header2 = loaded.header.clone();
        header2.tensor_index = Vec::new();
        write_checkpoint(&p2, header2, &renamed, Dtype::F64).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
