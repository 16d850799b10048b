mod common;

use common::criteria;

#[test]
fn retrieval_rerank_and_attention_match_brute_force() {
    criteria::oracle_equivalences().unwrap();
}
