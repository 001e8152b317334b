//! Noise scale of the analytic Gaussian mechanism across privacy budgets,
//! and what it means for the released statistics.

use dp_linreg::privacy::{
    analytic_gaussian_sigma, privacy_curve_delta, sensitivity_ss, sensitivity_sz, DataBounds, NoiseCalibration,
    PrivacyBudget,
};

fn main() -> dp_linreg::Result<()> {
    let delta = 1e-8;
    println!("{:>6} {:>12} {:>14}", "eps", "sigma(eps)", "delta at sigma");
    for eps in [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let sigma = analytic_gaussian_sigma(&PrivacyBudget::new(eps, delta)?)?;
        println!("{eps:>6} {sigma:>12.4} {:>14.3e}", privacy_curve_delta(eps, sigma));
    }

    let bounds = DataBounds::new(1.0, 1.0)?;
    println!("\nsensitivity of (S, z): {:.4}", sensitivity_sz(&bounds));
    println!("sensitivity of (S, z, yᵀy): {:.4}", sensitivity_ss(&bounds));

    let budget = PrivacyBudget::new(1.0, delta)?;
    let plain = NoiseCalibration::new(&budget, &bounds)?;
    let ext = NoiseCalibration::extended(&budget, &bounds)?;
    println!("noise std at eps = 1: {:.3} without yᵀy, {:.3} with it", plain.sigma_s, ext.sigma_s);
    Ok(())
}
