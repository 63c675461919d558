"""Dependency-free SVG line plots; text output, diffable in tests."""

WIDTH, HEIGHT = 520, 400
MARGIN = 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(v):
    return f"{v:.2f}"


class SvgCanvas:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        self.xlim = xlim
        self.ylim = ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
            f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#444"/>',
        ]
        if title:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="{MARGIN - 16}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="14">{title}</text>')
        if xlabel:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12">{xlabel}</text>')
        if ylabel:
            self.parts.append(
                f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12" '
                f'transform="rotate(-90 14 {HEIGHT / 2})">{ylabel}</text>')
        self._ticks()

    def _x(self, x):
        lo, hi = self.xlim
        return MARGIN + (x - lo) / (hi - lo) * (WIDTH - 2 * MARGIN)

    def _y(self, y):
        lo, hi = self.ylim
        return HEIGHT - MARGIN - (y - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN)

    def _ticks(self, count=5):
        for i in range(count):
            fx = self.xlim[0] + i * (self.xlim[1] - self.xlim[0]) / (count - 1)
            fy = self.ylim[0] + i * (self.ylim[1] - self.ylim[0]) / (count - 1)
            self.parts.append(
                f'<text x="{self._x(fx):.1f}" y="{HEIGHT - MARGIN + 16}" '
                f'text-anchor="middle" font-family="sans-serif" font-size="10">'
                f'{_fmt(fx)}</text>')
            self.parts.append(
                f'<text x="{MARGIN - 6}" y="{self._y(fy) + 3:.1f}" '
                f'text-anchor="end" font-family="sans-serif" font-size="10">'
                f'{_fmt(fy)}</text>')

    def polyline(self, xs, ys, color, dash=None, width=1.5, label=None):
        pts = " ".join(f"{self._x(x):.2f},{self._y(y):.2f}" for x, y in zip(xs, ys))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" '
                          f'stroke="{color}" stroke-width="{width}"{dash_attr}/>')
        if label:
            idx = len([p for p in self.parts if "legend" in p])
            y = MARGIN + 16 + 16 * idx
            self.parts.append(f'<!--legend--><line x1="{WIDTH - MARGIN - 90}" '
                              f'x2="{WIDTH - MARGIN - 64}" y1="{y - 4}" y2="{y - 4}" '
                              f'stroke="{color}" stroke-width="2"{dash_attr}/>')
            self.parts.append(f'<text x="{WIDTH - MARGIN - 58}" y="{y}" '
                              f'font-family="sans-serif" font-size="11">{label}</text>')

    def shade_x(self, lo, hi, color="#aec7e8", opacity=0.5):
        x0, x1 = self._x(lo), self._x(hi)
        self.parts.append(f'<rect x="{x0:.2f}" y="{MARGIN}" '
                          f'width="{x1 - x0:.2f}" height="{HEIGHT - 2 * MARGIN}" '
                          f'fill="{color}" fill-opacity="{opacity}"/>')

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.parts) + "\n</svg>\n")


def coverage_plot(path, curves, title="Expected coverage"):
    canvas = SvgCanvas((0.0, 1.0), (0.0, 1.0), title=title,
                       xlabel="credibility level", ylabel="expected coverage")
    canvas.polyline([0.0, 1.0], [0.0, 1.0], "#888", dash="4,4", label="diagonal")
    for i, curve in enumerate(curves):
        canvas.polyline(curve.levels, curve.ecp, PALETTE[i % len(PALETTE)],
                        label=curve.method)
    canvas.save(path)


def density_plot(path, xs, named_series, segments=(), title="", xlabel="value"):
    ymax = max(max(ys) for _, ys in named_series) * 1.08
    canvas = SvgCanvas((float(xs[0]), float(xs[-1])), (0.0, ymax), title=title,
                       xlabel=xlabel, ylabel="density")
    for lo, hi in segments:
        canvas.shade_x(lo, hi)
    colors = {"black": "#222", "red": "#d62728"}
    for i, (name, ys) in enumerate(named_series):
        canvas.polyline(xs, ys, colors.get(name, PALETTE[i % len(PALETTE)]),
                        label=name)
    canvas.save(path)
