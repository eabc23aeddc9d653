use std::io::{Read, Write};
use std::path::Path;

use super::{ModelSpec, Panel, PanelError, PanelObservation, DERIVED_FEATURES};

const REQUIRED: [&str; 6] = ["cell_id", "country_id", "month", "sb_fatalities", "lon", "lat"];
const OPTIONAL_COUNTS: [&str; 2] = ["os_fatalities", "ns_fatalities"];
const NA: &str = "NA";

/// Reads a panel CSV and checks that every raw covariate the spec needs is present.
pub fn load_panel(path: &Path, spec: &ModelSpec) -> Result<Panel, PanelError> {
    let panel = read_panel(std::fs::File::open(path)?)?;
    for name in spec.referenced_features() {
        let builtin = DERIVED_FEATURES.contains(&name.as_str()) || name == "lon" || name == "lat";
        if !builtin && panel.covariate_index(&name).is_none() {
            return Err(PanelError::MissingColumn(name));
        }
    }
    Ok(panel)
}

pub fn read_panel<R: Read>(reader: R) -> Result<Panel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut required = [0usize; 6];
    for (slot, name) in required.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| PanelError::MissingColumn(name.to_string()))?;
    }
    let [cell_c, country_c, month_c, sb_c, lon_c, lat_c] = required;
    let os_c = col(OPTIONAL_COUNTS[0]);
    let ns_c = col(OPTIONAL_COUNTS[1]);
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !REQUIRED.contains(&h.trim()) && !OPTIONAL_COUNTS.contains(&h.trim()))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let bad = |what: &str, i: usize| PanelError::Malformed {
            line,
            message: format!("cannot parse {what} from `{}`", field(i)),
        };
        let int = |i: usize, what: &str| field(i).parse::<i64>().map_err(|_| bad(what, i));
        let count = |i: usize, what: &str| field(i).parse::<u64>().map_err(|_| bad(what, i));
        let real = |i: usize, what: &str| {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(what, i))
        };
        let month = int(month_c, "month")?;
        let month = i32::try_from(month).map_err(|_| bad("month", month_c))?;
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (i, name) in &cov_cols {
            let raw = field(*i);
            if raw.is_empty() || raw == NA {
                covariates.push(None);
            } else {
                covariates.push(Some(real(*i, name)?));
            }
        }
        rows.push(PanelObservation {
            cell_id: int(cell_c, "cell_id")?,
            country_id: int(country_c, "country_id")?,
            month,
            sb_fatalities: count(sb_c, "sb_fatalities")?,
            os_fatalities: os_c.map_or(Ok(0), |c| count(c, "os_fatalities"))?,
            ns_fatalities: ns_c.map_or(Ok(0), |c| count(c, "ns_fatalities"))?,
            lon: real(lon_c, "lon")?,
            lat: real(lat_c, "lat")?,
            covariates,
        });
    }
    Panel::new(cov_cols.into_iter().map(|(_, n)| n).collect(), rows)
}

/// Canonical CSV rendering: fixed leading columns, covariates in panel order,
/// shortest round-trip float formatting, `NA` for missing values.
pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = vec![
        "cell_id",
        "country_id",
        "month",
        "sb_fatalities",
        "os_fatalities",
        "ns_fatalities",
        "lon",
        "lat",
    ];
    header.extend(panel.covariate_names().iter().map(String::as_str));
    w.write_record(&header)?;
    for r in panel.rows() {
        let mut rec = vec![
            r.cell_id.to_string(),
            r.country_id.to_string(),
            r.month.to_string(),
            r.sb_fatalities.to_string(),
            r.os_fatalities.to_string(),
            r.ns_fatalities.to_string(),
            r.lon.to_string(),
            r.lat.to_string(),
        ];
        rec.extend(
            r.covariates
                .iter()
                .map(|v| v.map_or_else(|| NA.to_string(), |x| x.to_string())),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
cell_id,country_id,month,sb_fatalities,lon,lat,gdp
2,1,1,0,10.5,3.0,1.5
1,1,0,4,10.0,3.0,2.0
3,2,0,0,11.0,3.5,NA
";

    #[test]
    fn three_rows_sorted() {
        let p = read_panel(FIXTURE.as_bytes()).unwrap();
        assert_eq!(p.len(), 3);
        let keys: Vec<_> = p.rows().iter().map(|r| (r.country_id, r.cell_id, r.month)).collect();
        assert_eq!(keys, vec![(1, 1, 0), (1, 2, 1), (2, 3, 0)]);
        assert_eq!(p.rows()[0].sb_fatalities, 4);
    }

    #[test]
    fn missing_value_sets_imputation_flag() {
        let p = read_panel(FIXTURE.as_bytes()).unwrap();
        assert!(p.rows()[2].needs_imputation());
        assert!(!p.rows()[0].needs_imputation());
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "cell_id,country_id,month,sb_fatalities,lon,lat\n1,1,0,0,1,1\n1,1,x,0,1,1\n";
        match read_panel(text.as_bytes()) {
            Err(PanelError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn negative_count_is_malformed() {
        let text = "cell_id,country_id,month,sb_fatalities,lon,lat\n1,1,0,-2,1,1\n";
        assert!(matches!(
            read_panel(text.as_bytes()),
            Err(PanelError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn cell_in_two_countries() {
        let text = "cell_id,country_id,month,sb_fatalities,lon,lat\n7,1,0,0,1,1\n7,2,1,0,1,1\n";
        assert!(matches!(
            read_panel(text.as_bytes()),
            Err(PanelError::CellInTwoCountries { cell: 7, .. })
        ));
    }

    #[test]
    fn canonical_output_round_trips() {
        let p = read_panel(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        let back = read_panel(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        let mut again = Vec::new();
        write_panel(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn spec_columns_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, FIXTURE).unwrap();
        let spec = ModelSpec::default_conflict();
        assert!(matches!(
            load_panel(&path, &spec),
            Err(PanelError::MissingColumn(_))
        ));
    }
}
