mod oracle_checks;

#[test]
fn gae_with_unit_lambda_matches_discounted_sums() {
    oracle_checks::gae_with_unit_lambda_matches_discounted_sums();
}

#[test]
fn gradients_match_finite_differences() {
    oracle_checks::gradients_match_finite_differences();
}

#[test]
fn fk_matches_two_link_closed_form() {
    oracle_checks::fk_matches_two_link_closed_form();
}
