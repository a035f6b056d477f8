import init, { membership_curves, simulate_preset, identification_check } from "./pkg/tate_wasm.js";

const $ = (id) => document.getElementById(id);
const colors = ["#222", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const fmt = (x, d = 4) => (x == null ? "-" : x.toFixed(d));

function numbers(text) {
  return JSON.stringify(text.split(",").map((s) => Number(s.trim())));
}

function table(header, rows) {
  const head = "<tr>" + header.map((h) => `<th>${h}</th>`).join("") + "</tr>";
  const body = rows.map((r) => "<tr>" + r.map((c) => `<td>${c}</td>`).join("") + "</tr>").join("");
  return `<table>${head}${body}</table>`;
}

function guarded(out, f) {
  try {
    f();
  } catch (e) {
    $(out).innerHTML = `<p class="err">${e}</p>`;
  }
}

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad / 2, w - 1.5 * pad, h - 1.5 * pad);
}

function drawCurves(c) {
  const cv = $("mc-plot"), ctx = cv.getContext("2d");
  const pad = 30, w = cv.width, h = cv.height;
  axes(ctx, w, h, pad);
  const px = (x) => pad + ((x + 3) / 6) * (w - 1.5 * pad);
  const py = (p) => h - pad - p * (h - 1.5 * pad);
  c.probs.forEach((col, s) => {
    ctx.strokeStyle = colors[s % colors.length];
    ctx.beginPath();
    col.forEach((p, i) => (i ? ctx.lineTo(px(c.x[i]), py(p)) : ctx.moveTo(px(c.x[i]), py(p))));
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(s === 0 ? "target" : `trial ${s}`, w - 1.5 * pad + 4 - 40, pad / 2 + 12 + 12 * s);
  });
  ctx.fillStyle = "#555";
  ctx.fillText("x = -3", pad, h - pad / 3);
  ctx.fillText("x = 3", w - pad * 2, h - pad / 3);
}

function runCurves() {
  guarded("mc-out", () => {
    const c = JSON.parse(membership_curves(numbers($("mc-slopes").value), numbers($("mc-sizes").value), Number($("mc-n").value), 121));
    $("mc-out").innerHTML = table(
      ["Group", "Intercept", "Expected size"],
      c.sizes.map((sz, s) => [s === 0 ? "target" : `trial ${s}`, s === 0 ? "0" : fmt(c.intercepts[s - 1]), fmt(sz, 1)])
    );
    drawCurves(c);
  });
}

function drawStrip(r) {
  const cv = $("sim-plot"), ctx = cv.getContext("2d");
  const pad = 30, w = cv.width, h = cv.height;
  axes(ctx, w, h, pad);
  const all = r.estimators.flatMap((e) => e.estimates).concat([r.truth]);
  const lo = Math.min(...all), hi = Math.max(...all), span = hi - lo || 1;
  const px = (v) => pad + 90 + ((v - lo) / span) * (w - 2.5 * pad - 90);
  const rowH = (h - 1.5 * pad) / r.estimators.length;
  r.estimators.forEach((e, k) => {
    const y = pad / 2 + rowH * (k + 0.5);
    ctx.fillStyle = colors[k + 1];
    ctx.fillText(e.estimator, pad + 4, y + 4);
    e.estimates.forEach((v) => ctx.fillRect(px(v) - 1, y - 6, 2, 12));
  });
  ctx.strokeStyle = "#000";
  ctx.setLineDash([4, 3]);
  ctx.beginPath();
  ctx.moveTo(px(r.truth), pad / 2);
  ctx.lineTo(px(r.truth), h - pad);
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.fillStyle = "#555";
  ctx.fillText(fmt(lo, 3), pad + 90, h - pad / 3);
  ctx.fillText(fmt(hi, 3), w - 2 * pad, h - pad / 3);
}

function runSimulation() {
  $("sim-out").textContent = "Running...";
  setTimeout(() =>
    guarded("sim-out", () => {
      const r = JSON.parse(simulate_preset($("sim-preset").value, Number($("sim-n").value), Number($("sim-reps").value), BigInt($("sim-seed").value)));
      $("sim-out").innerHTML =
        `<p>True effect ${fmt(r.truth)}; expected trial sizes ${r.sizes.slice(1).map((s) => s.toFixed(0)).join(", ")}</p>` +
        table(["Estimator", "Bias", "EmpSE", "Fits"], r.estimators.map((e) => [e.estimator, fmt(e.bias), fmt(e.emp_se), e.estimates.length]));
      drawStrip(r);
    })
  );
}

function runIdentification() {
  guarded("id-out", () => {
    const m = Number($("id-m").value);
    const r = JSON.parse(identification_check(m, Number($("id-atoms").value), $("id-violate").checked, BigInt($("id-seed").value)));
    const diff = Math.abs(r.direct - r.via_identification);
    const rows = [
      ["Condition gap", r.gap.toExponential(3)],
      ["Direct target effect", fmt(r.direct, 10)],
      ["Identified from trials", fmt(r.via_identification, 10)],
      ["Difference", diff.toExponential(3)],
    ].concat(r.study_effects.map((d, s) => [`Trial ${s + 1} effect`, fmt(d, 10)]));
    const cate = table(
      ["x"].concat(["target"], Array.from({ length: m }, (_, s) => `trial ${s + 1}`)),
      r.support.map((x, k) => [fmt(x, 3)].concat(r.cate[k].map((c) => fmt(c, 3))))
    );
    $("id-out").innerHTML = table(["Quantity", "Value"], rows) + "<p>Conditional effects by atom</p>" + cate;
  });
}

init().then(() => {
  $("status").textContent = "";
  $("mc-run").onclick = runCurves;
  $("sim-run").onclick = runSimulation;
  $("id-run").onclick = runIdentification;
  runCurves();
  runIdentification();
});
