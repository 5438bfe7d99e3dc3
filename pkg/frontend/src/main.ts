// Bootstrap: wire the three panes to the DOM and the service.

import { ApiClient } from "./api.js";
import { ChatPane } from "./chat.js";
import { EventsPane } from "./events.js";
import { UpdatePane } from "./update.js";
import { captureSupported, fileToBase64, snapshotBase64, startPreview, stopPreview } from "./webcam.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function serverBase(): string {
  const params = new URLSearchParams(location.search);
  // served from /console on the service itself unless ?server= overrides
  return params.get("server") ?? location.origin;
}

window.addEventListener("DOMContentLoaded", () => {
  const api = new ApiClient(serverBase());

  const chat = new ChatPane(api, {
    messages: el("messages"),
    stateBadge: el("state-badge"),
    roundBadge: el("round-badge"),
    input: el<HTMLInputElement>("chat-input"),
    sendButton: el<HTMLButtonElement>("send-button"),
    feedbackBar: el("feedback-bar"),
    confirmButton: el<HTMLButtonElement>("confirm-button"),
    correctInput: el<HTMLInputElement>("correct-input"),
    correctButton: el<HTMLButtonElement>("correct-button"),
    referencePanel: el("reference-panel"),
    retryBanner: el("retry-banner"),
    retryButton: el<HTMLButtonElement>("retry-button"),
  });
  const events = new EventsPane(api, {
    tableBody: el("events-body"),
    emptyState: el("events-empty"),
    pageLabel: el("events-page-label"),
    prevButton: el<HTMLButtonElement>("events-prev"),
    nextButton: el<HTMLButtonElement>("events-next"),
    errorState: el("events-error"),
  });
  const update = new UpdatePane(api, {
    progressBar: el("update-progress-bar"),
    progressLabel: el("update-progress-label"),
    modelVersion: el("model-version"),
    lastBatch: el("last-batch"),
    jobStatus: el("job-status"),
    errorState: el("update-error"),
  });

  // after a stored correction the browser pane must show it on next refresh
  chat.onEventStored = () => {
    void events.refresh();
    void update.refresh();
  };

  // image selection: file upload always, webcam behind a capability check
  const fileInput = el<HTMLInputElement>("image-file");
  const openButton = el<HTMLButtonElement>("open-session");
  const firstInput = el<HTMLInputElement>("first-utterance");
  let imageB64: string | null = null;

  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (file) {
      imageB64 = await fileToBase64(file);
      el("image-status").textContent = `loaded ${file.name}`;
    }
  });

  const webcamButton = el<HTMLButtonElement>("webcam-button");
  const video = el<HTMLVideoElement>("webcam-preview");
  if (!captureSupported()) {
    webcamButton.hidden = true;
  } else {
    let stream: MediaStream | null = null;
    webcamButton.addEventListener("click", async () => {
      if (stream === null) {
        stream = await startPreview(video);
        video.hidden = false;
        webcamButton.textContent = "Capture frame";
      } else {
        imageB64 = snapshotBase64(video);
        el("image-status").textContent = "captured webcam frame";
        stopPreview(stream);
        stream = null;
        video.hidden = true;
        webcamButton.textContent = "Use webcam";
      }
    });
  }

  openButton.addEventListener("click", () => {
    const utterance = firstInput.value.trim();
    if (!imageB64 || !utterance) {
      el("image-status").textContent = "pick an image and type a question first";
      return;
    }
    void chat.open(imageB64, utterance);
  });

  void events.refresh();
  void update.refresh();
  setInterval(() => void update.refresh(), 5000);
});
