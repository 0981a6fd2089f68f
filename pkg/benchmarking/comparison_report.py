#!/usr/bin/env python3
"""
Comparison Report Generator
Renders an ablation results JSON as a markdown table, marking the best
variant per metric (lowest MRAE/RMSE/SAM, highest PSNR/ASSIM).

Usage:
    python comparison_report.py results/ablation_*.json
    python comparison_report.py results/ablation_*.json --output report.md
    python comparison_report.py results/ablation_*.json --summary
"""

import argparse
import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

LOWER_IS_BETTER = {"mrae": True, "rmse": True, "sam_degrees": True, "psnr_db": False, "assim": False}
HEADERS = {"mrae": "MRAE", "rmse": "RMSE", "sam_degrees": "SAM (deg)", "psnr_db": "PSNR (dB)", "assim": "ASSIM"}


class ComparisonReportGenerator:
    """Generates comparison reports from ablation results"""

    def __init__(self, results_file: str):
        self.results_file = Path(results_file)

        with open(self.results_file, 'r') as f:
            self.data = json.load(f)

        self.results = self.data.get("results", [])
        self.metric_keys = [k for k in self.data.get("metric_keys", list(LOWER_IS_BETTER)) if k in LOWER_IS_BETTER]

    def best_variants(self) -> Dict[str, str]:
        """Metric key -> name of the best variant."""
        best = {}
        for key in self.metric_keys:
            scored = [(r["metrics"][key], r["variant"]) for r in self.results if key in r.get("metrics", {})]
            if not scored:
                continue
            pick = min(scored) if LOWER_IS_BETTER[key] else max(scored)
            best[key] = pick[1]
        return best

    def markdown_table(self) -> List[str]:
        best = self.best_variants()
        lines = ["| Variant | Changes | " + " | ".join(HEADERS[k] for k in self.metric_keys) + " |",
                 "|---|---|" + "---|" * len(self.metric_keys)]
        for r in self.results:
            changes = ", ".join(f"{k}={v}" for k, v in r.get("changes", {}).items()) or "-"
            cells = []
            for key in self.metric_keys:
                value = r["metrics"].get(key)
                text = "n/a" if value is None else f"{value:.4f}"
                cells.append(f"**{text}**" if best.get(key) == r["variant"] else text)
            lines.append(f"| {r['variant']} | {changes} | " + " | ".join(cells) + " |")
        return lines

    def generate_markdown_report(self, output_file: Optional[str] = None) -> str:
        if not output_file:
            output_file = self.results_file.parent / f"comparison_report_{datetime.now().strftime('%Y%m%d_%H%M%S')}.md"

        lines = []
        lines.append("# HPRN Ablation Report")
        lines.append("")
        lines.append(f"**Generated:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        lines.append(f"**Source File:** {self.results_file.name}")
        lines.append(f"**Corpus:** {self.data.get('corpus', 'unknown')} (seed {self.data.get('seed', '?')})")
        lines.append(f"**Variants:** {len(self.results)}")
        lines.append("")
        lines.append("---")
        lines.append("## Validation Metrics")
        lines.append("")
        lines.append("Best value per metric in bold. Lower is better for MRAE, RMSE and SAM; higher for PSNR and ASSIM.")
        lines.append("")
        lines.extend(self.markdown_table())
        lines.append("")

        full = next((r for r in self.results if r["variant"] == "full"), None)
        if full:
            lines.append("## Change vs Full Model")
            lines.append("")
            lines.append("| Variant | dMRAE | dSAM (deg) |")
            lines.append("|---|---|---|")
            for r in self.results:
                if r is full:
                    continue
                d_mrae = r["metrics"]["mrae"] - full["metrics"]["mrae"]
                d_sam = r["metrics"]["sam_degrees"] - full["metrics"]["sam_degrees"]
                lines.append(f"| {r['variant']} | {d_mrae:+.4f} | {d_sam:+.3f} |")
            lines.append("")

        report = "\n".join(lines)
        with open(output_file, 'w') as f:
            f.write(report)
        print(f"Report saved to: {output_file}")
        return report

    def print_summary(self):
        print("=" * 60)
        print(f"ABLATION SUMMARY ({len(self.results)} variants)")
        print("=" * 60)
        for key, name in self.best_variants().items():
            print(f"  best {HEADERS[key]:10s}: {name}")


def main():
    parser = argparse.ArgumentParser(description="Generate comparison report from ablation results")
    parser.add_argument("results_file", help="Path to ablation results JSON file")
    parser.add_argument("--output", "-o", help="Output markdown file path")
    parser.add_argument("--summary", "-s", action="store_true", help="Print summary only")

    args = parser.parse_args()

    generator = ComparisonReportGenerator(args.results_file)

    if args.summary:
        generator.print_summary()
    else:
        generator.print_summary()
        generator.generate_markdown_report(args.output)


if __name__ == "__main__":
    main()
