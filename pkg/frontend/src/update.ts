// Update-status panel: progress toward the export threshold, last batch,
// trainer job status, active model version.

import { ApiClient, ApiError } from "./api.js";
import { updateProgressPercent } from "./state.js";

export interface UpdateElements {
  progressBar: HTMLElement;
  progressLabel: HTMLElement;
  modelVersion: HTMLElement;
  lastBatch: HTMLElement;
  jobStatus: HTMLElement;
  errorState: HTMLElement;
}

export class UpdatePane {
  constructor(
    private readonly api: ApiClient,
    private readonly el: UpdateElements,
  ) {}

  async refresh(): Promise<void> {
    try {
      const status = await this.api.updateStatus();
      const percent = updateProgressPercent(
        status.pending_toward_threshold,
        status.threshold,
      );
      this.el.progressBar.style.width = `${percent}%`;
      this.el.progressLabel.textContent =
        `${status.pending_toward_threshold} / ${status.threshold} events toward next update (${percent}%)`;
      this.el.modelVersion.textContent = status.active_model_version;
      this.el.lastBatch.textContent = status.last_batch_id ?? "none yet";
      this.el.jobStatus.textContent = status.pending_job
        ? `${status.pending_job.job_id}: ${status.pending_job.status}`
        : "no job running";
      this.el.errorState.hidden = true;
    } catch (err) {
      this.el.errorState.hidden = false;
      this.el.errorState.textContent =
        err instanceof ApiError ? `cannot load update status: ${err.message}` : String(err);
    }
  }
}
